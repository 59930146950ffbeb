"""
MPC nello spazio lifted e i due baseline (PI senza twist, MPC su modello lineare).

La dinamica g_{t+1} = K g_t + L u_t viene sostituita nel costo (condensing):
resta un QP convesso con soli vincoli box sui controlli, mentre i bound di
stato diventano una penalità quadratica. Il QP è risolto con un gradiente
proiettato accelerato monotono (MFISTA) in metrica diagonale, con passi di
Newton ridotti sulle variabili libere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import json
import logging
import math

import numpy as np

from .core import (
    MAX_ROTATION_RAD,
    MAX_TRANSLATION_MM,
    ControlCommand,
    WireState,
)
from .koopman import DatasetError, ModelFormatError, fit_arrays
from .sim import Trajectory, trajectories_to_arrays

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


N_STATE = 4  # (x, y, theta, f)
N_CONTROLS = 3

DEFAULT_Q: Tuple[float, ...] = (10.0, 10.0, 0.0, 1.0) + (0.0,) * 16
DEFAULT_R: Tuple[float, ...] = (0.1, 0.1, 0.1)


class InfeasibleStateError(ValueError):
    """Initial lifted state outside the configured state bounds."""


class SolverError(RuntimeError):
    """QP solver did not converge within max_iterations."""

    def __init__(self, residual: float, iterations: int) -> None:
        super().__init__(
            f"MPC solver did not converge: residual={residual:.3e} "
            f"after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


class LiftedModel(Protocol):
    K: np.ndarray
    L: np.ndarray

    def lift(self, state: WireState, phi: float) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Configurazione
# ---------------------------------------------------------------------------
def _as_float_tuple(values: Sequence[float]) -> Tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 10
    q_diag: Tuple[float, ...] = DEFAULT_Q
    r_diag: Tuple[float, ...] = DEFAULT_R
    # bound su A g = (x, y, theta, f); theta predetto può superare il wrap
    state_lower: Tuple[float, ...] = (-400.0, -400.0, -2.0 * math.pi, 0.0)
    state_upper: Tuple[float, ...] = (400.0, 400.0, 2.0 * math.pi, 15.0)
    # |phi| <= twist_limit (rad), solo per modelli con la coordinata phi
    twist_limit: float = 2.8
    control_lower: Tuple[float, ...] = (
        -MAX_TRANSLATION_MM,
        -MAX_TRANSLATION_MM,
        -MAX_ROTATION_RAD,
    )
    control_upper: Tuple[float, ...] = (
        MAX_TRANSLATION_MM,
        MAX_TRANSLATION_MM,
        MAX_ROTATION_RAD,
    )
    state_penalty: float = 1e3
    tolerance: float = 1e-6
    max_iterations: int = 5000
    polish_every: int = 10

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if any(q < 0.0 for q in self.q_diag):
            raise ValueError("Q diagonal entries must be >= 0")
        if len(self.r_diag) != N_CONTROLS or any(r < 0.0 for r in self.r_diag):
            raise ValueError("R must have 3 non-negative diagonal entries")
        for lo_name, hi_name, size in (
            ("state_lower", "state_upper", N_STATE),
            ("control_lower", "control_upper", N_CONTROLS),
        ):
            lo = getattr(self, lo_name)
            hi = getattr(self, hi_name)
            if len(lo) != size or len(hi) != size:
                raise ValueError(f"{lo_name}/{hi_name} must have {size} entries")
            if any(a > b for a, b in zip(lo, hi)):
                raise ValueError(f"{lo_name} must be <= {hi_name} elementwise")
        if not math.isfinite(self.twist_limit) or self.twist_limit <= 0.0:
            raise ValueError(f"twist_limit must be > 0, got {self.twist_limit}")
        if self.state_penalty < 0.0:
            raise ValueError("state_penalty must be >= 0")
        if self.tolerance <= 0.0 or self.max_iterations < 1 or self.polish_every < 1:
            raise ValueError("tolerance, max_iterations, polish_every must be positive")

    def with_overrides(self, overrides: Optional[Dict[str, object]]) -> MpcConfig:
        if not overrides:
            return self
        known = set(self.__dataclass_fields__)
        values: Dict[str, object] = {}
        for key, value in overrides.items():
            if key not in known:
                raise ValueError(f"unknown mpc parameter '{key}'")
            if isinstance(value, (list, tuple)):
                values[key] = _as_float_tuple(value)
            elif key in ("horizon", "max_iterations", "polish_every"):
                values[key] = int(value)  # type: ignore[arg-type]
            else:
                values[key] = float(value)  # type: ignore[arg-type]
        return replace(self, **values)

    def with_translation_limit(self, max_translation: float) -> MpcConfig:
        return replace(
            self,
            control_lower=(-max_translation, -max_translation, self.control_lower[2]),
            control_upper=(max_translation, max_translation, self.control_upper[2]),
        )

    def saturate(self, state: WireState) -> WireState:
        """Proietta uno stato misurato nel box dei bound di stato."""
        lo, hi = self.state_lower, self.state_upper
        clipped = WireState(
            x=min(max(state.x, lo[0]), hi[0]),
            y=min(max(state.y, lo[1]), hi[1]),
            theta=min(max(state.theta, lo[2]), hi[2]),
            f=min(max(state.f, lo[3]), hi[3]),
        )
        if clipped != state:
            log.debug("measured state %s saturated to %s", state, clipped)
        return clipped

    def bounds_for_dim(self, dim: int) -> Tuple[np.ndarray, np.ndarray]:
        """Bound sulle coordinate vincolate di g: (x, y, theta, f[, phi])."""
        lo = list(self.state_lower)
        hi = list(self.state_upper)
        if dim > N_STATE:
            lo.append(-self.twist_limit)
            hi.append(self.twist_limit)
        return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)

    def q_for_dim(self, dim: int) -> np.ndarray:
        """Diagonale di Q troncata (o estesa con zeri) alla dimensione del modello."""
        q = np.zeros(dim)
        k = min(dim, len(self.q_diag))
        q[:k] = self.q_diag[:k]
        return q


@dataclass(frozen=True)
class TrackingTarget:
    """Waypoint (fix-point frame, mm) e tensione desiderata (N)."""

    x_d: float
    y_d: float
    f_d: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.f_d) or self.f_d < 0.0:
            raise ValueError(f"f_d must be finite and >= 0, got {self.f_d}")
        if not (math.isfinite(self.x_d) and math.isfinite(self.y_d)):
            raise ValueError("target position must be finite")


def desired_lift(target: TrackingTarget, dim: int, theta_d: float = 0.0) -> np.ndarray:
    """g_d = (x_d, y_d, theta_d, f_d, 0, ..., 0)."""
    g_d = np.zeros(dim)
    g_d[:N_STATE] = (target.x_d, target.y_d, theta_d, target.f_d)
    return g_d


# ---------------------------------------------------------------------------
# Condensing
# ---------------------------------------------------------------------------
@dataclass
class CondensedProblem:
    """
    Matrici che non dipendono da stato e target: g_{1..H} = Phi g_0 + Gamma U.
    Hq è l'hessiana del costo di tracking, Sel = A Gamma seleziona gli stati
    vincolati, D è la metrica diagonale (Gershgorin) usata dal gradiente.
    """

    horizon: int
    dim: int
    Phi: np.ndarray
    Gamma: np.ndarray
    q_bar: np.ndarray
    Hq: np.ndarray
    Sel: np.ndarray
    SelPhi: np.ndarray
    D: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    s_lower: np.ndarray
    s_upper: np.ndarray
    penalty: float


def condense(K: np.ndarray, L: np.ndarray, cfg: MpcConfig) -> CondensedProblem:
    K = np.asarray(K, dtype=float)
    L = np.asarray(L, dtype=float)
    n, m = L.shape
    if K.shape != (n, n) or m != N_CONTROLS or n < N_STATE:
        raise ValueError(f"incompatible model shapes K{K.shape} L{L.shape}")
    H = cfg.horizon

    powers = [np.eye(n)]
    for _ in range(H):
        powers.append(K @ powers[-1])
    Phi = np.vstack(powers[1:])
    KL = [powers[j] @ L for j in range(H)]
    Gamma = np.zeros((H * n, H * m))
    for t in range(H):
        for s in range(t + 1):
            Gamma[t * n : (t + 1) * n, s * m : (s + 1) * m] = KL[t - s]

    q_bar = np.tile(cfg.q_for_dim(n), H)
    r_bar = np.tile(np.asarray(cfg.r_diag, dtype=float), H)
    Hq = 2.0 * (Gamma.T @ (q_bar[:, None] * Gamma) + np.diag(r_bar))

    b_lo, b_hi = cfg.bounds_for_dim(n)
    n_bound = len(b_lo)
    rows = np.concatenate([np.arange(n_bound) + t * n for t in range(H)])
    Sel = Gamma[rows]
    SelPhi = Phi[rows]

    w = cfg.state_penalty
    M_full = Hq + 2.0 * w * (Sel.T @ Sel)
    D = np.sum(np.abs(M_full), axis=1)
    floor = 1e-12 * max(float(np.max(D)), 1.0)
    D = np.maximum(D, floor)

    return CondensedProblem(
        horizon=H,
        dim=n,
        Phi=Phi,
        Gamma=Gamma,
        q_bar=q_bar,
        Hq=Hq,
        Sel=Sel,
        SelPhi=SelPhi,
        D=D,
        u_lower=np.tile(np.asarray(cfg.control_lower, dtype=float), H),
        u_upper=np.tile(np.asarray(cfg.control_upper, dtype=float), H),
        s_lower=np.tile(b_lo, H),
        s_upper=np.tile(b_hi, H),
        penalty=w,
    )


# ---------------------------------------------------------------------------
# QP solver
# ---------------------------------------------------------------------------
@dataclass
class SolveResult:
    control: ControlCommand
    objective: float
    iterations: int
    residual: float
    objective_history: List[float] = field(default_factory=list)
    u_sequence: Optional[np.ndarray] = None


class _PenalizedQp:
    """0.5 U'Hq U + c'U + const + w * ||viol(Sel U + s0)||^2 su un box."""

    def __init__(self, cp: CondensedProblem, g0: np.ndarray, g_d: np.ndarray) -> None:
        self.cp = cp
        e0 = cp.Phi @ g0 - np.tile(g_d, cp.horizon)
        qe0 = cp.q_bar * e0
        self.c = 2.0 * (cp.Gamma.T @ qe0)
        self.const = float(e0 @ qe0)
        self.s0 = cp.SelPhi @ g0
        self.lo = cp.u_lower
        self.hi = cp.u_upper
        width = self.hi - self.lo
        self.scale = np.where(np.isfinite(width), np.minimum(1.0, width), 1.0)
        self.scale = np.where(self.scale > 0.0, self.scale, 1.0)

    def _violation(self, U: np.ndarray) -> np.ndarray:
        a = self.cp.Sel @ U + self.s0
        upper = np.maximum(a - self.cp.s_upper, 0.0)
        return upper + np.minimum(a - self.cp.s_lower, 0.0)

    def objective(self, U: np.ndarray) -> float:
        v = self._violation(U)
        quad = 0.5 * float(U @ (self.cp.Hq @ U)) + float(self.c @ U)
        return quad + self.const + self.cp.penalty * float(v @ v)

    def gradient(self, U: np.ndarray) -> np.ndarray:
        v = self._violation(U)
        return self.cp.Hq @ U + self.c + 2.0 * self.cp.penalty * (self.cp.Sel.T @ v)

    def project(self, U: np.ndarray) -> np.ndarray:
        return np.clip(U, self.lo, self.hi)

    def residual(self, U: np.ndarray) -> float:
        """Residuo di punto fisso del gradiente proiettato, normalizzato sul box."""
        r = (self.project(U - self.gradient(U)) - U) / self.scale
        return float(np.max(np.abs(r))) if r.size else 0.0

    def newton_polish(self, U: np.ndarray) -> np.ndarray:
        """Passo di Newton esatto sulle variabili libere (vincoli attivi fissati)."""
        g = self.gradient(U)
        blocked = ((U <= self.lo) & (g > 0.0)) | ((U >= self.hi) & (g < 0.0))
        free = ~blocked
        if not np.any(free):
            return U
        a = self.cp.Sel @ U + self.s0
        active = (a > self.cp.s_upper) | (a < self.cp.s_lower)
        M = self.cp.Hq
        if np.any(active):
            S_act = self.cp.Sel[active]
            M = M + 2.0 * self.cp.penalty * (S_act.T @ S_act)
        step, *_ = np.linalg.lstsq(M[np.ix_(free, free)], -g[free], rcond=None)
        trial = U.copy()
        trial[free] += step
        return self.project(trial)


def _mfista(
    qp: _PenalizedQp, D: np.ndarray, cfg: MpcConfig
) -> Tuple[np.ndarray, int, float, List[float]]:
    x = qp.project(np.zeros_like(D))
    f_x = qp.objective(x)
    history = [f_x]
    res = qp.residual(x)
    if res <= cfg.tolerance:
        return x, 0, res, history

    y = x.copy()
    t = 1.0
    for it in range(1, cfg.max_iterations + 1):
        z = qp.project(y - qp.gradient(y) / D)
        f_z = qp.objective(z)
        if f_z <= f_x:
            x_new, f_new = z, f_z
        else:
            x_new, f_new = x, f_x
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + (t / t_next) * (z - x_new) + ((t - 1.0) / t_next) * (x_new - x)
        x, f_x, t = x_new, f_new, t_next

        if it % cfg.polish_every == 0:
            trial = qp.newton_polish(x)
            f_trial = qp.objective(trial)
            if f_trial <= f_x:
                x, f_x = trial, f_trial
                y = x.copy()
                t = 1.0

        history.append(f_x)
        res = qp.residual(x)
        if res <= cfg.tolerance:
            log.debug("mpc converged in %d iterations (res=%.2e)", it, res)
            return x, it, res, history

    raise SolverError(res, cfg.max_iterations)


def solve_detailed(
    model: LiftedModel,
    state: WireState,
    phi: float,
    target: TrackingTarget,
    cfg: MpcConfig,
    condensed: Optional[CondensedProblem] = None,
    theta_d: float = 0.0,
) -> SolveResult:
    cp = condensed if condensed is not None else condense(model.K, model.L, cfg)
    g0 = np.asarray(model.lift(state, phi), dtype=float)

    a0 = g0[:N_STATE]
    lo = np.asarray(cfg.state_lower)
    hi = np.asarray(cfg.state_upper)
    tol = 1e-9 * np.maximum(1.0, np.abs(a0))
    if np.any(a0 < lo - tol) or np.any(a0 > hi + tol):
        raise InfeasibleStateError(
            f"initial state {a0.tolist()} outside bounds [{lo.tolist()}, {hi.tolist()}]"
        )

    qp = _PenalizedQp(cp, g0, desired_lift(target, cp.dim, theta_d))
    U, iterations, residual, history = _mfista(qp, cp.D, cfg)
    return SolveResult(
        control=ControlCommand.from_array(U[:N_CONTROLS]),
        objective=history[-1],
        iterations=iterations,
        residual=residual,
        objective_history=history,
        u_sequence=U.reshape(cp.horizon, N_CONTROLS),
    )


def solve(
    model: LiftedModel,
    state: WireState,
    phi: float,
    target: TrackingTarget,
    cfg: MpcConfig,
    condensed: Optional[CondensedProblem] = None,
) -> ControlCommand:
    return solve_detailed(model, state, phi, target, cfg, condensed).control


# ---------------------------------------------------------------------------
# Baseline: PI senza twist
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PiGains:
    kp: float = 4.0  # mm / (N step)
    ki: float = 0.5  # mm / (N step)
    integral_limit: float = 20.0  # mm

    def with_overrides(self, overrides: Optional[Dict[str, float]]) -> PiGains:
        if not overrides:
            return self
        for key in overrides:
            if key not in self.__dataclass_fields__:
                raise ValueError(f"unknown PI parameter '{key}'")
        return replace(self, **{k: float(v) for k, v in overrides.items()})


@dataclass
class PiMemory:
    integral: float = 0.0

    def reset(self) -> None:
        self.integral = 0.0


def _unit(x: float, y: float) -> Optional[Tuple[float, float]]:
    n = math.hypot(x, y)
    if n < 1e-9:
        return None
    return (x / n, y / n)


def pi_no_twist(
    state: WireState,
    target: TrackingTarget,
    gains: PiGains = PiGains(),
    memory: Optional[PiMemory] = None,
    max_translation: float = MAX_TRANSLATION_MM,
) -> ControlCommand:
    """
    Stretching lungo la direzione fix-point -> target, con ampiezza data da un
    PI sull'errore di forza. Nessuna rotazione.
    """
    if memory is None:
        memory = PiMemory()
    error = target.f_d - state.f
    limit = gains.integral_limit
    memory.integral = float(np.clip(memory.integral + gains.ki * error, -limit, limit))
    magnitude = gains.kp * error + memory.integral

    direction = _unit(target.x_d, target.y_d) or _unit(state.x, state.y)
    if direction is None or magnitude == 0.0:
        return ControlCommand.zero()
    dx = magnitude * direction[0]
    dy = magnitude * direction[1]
    peak = max(abs(dx), abs(dy))
    if peak > max_translation:
        dx *= max_translation / peak
        dy *= max_translation / peak
    return ControlCommand(dx, dy, 0.0)


# ---------------------------------------------------------------------------
# Baseline: dinamica lineare sullo stato grezzo
# ---------------------------------------------------------------------------
@dataclass
class LinearModel:
    """s_{t+1} = A s_t + B u_t con s = (x, y, theta, f)."""

    A: np.ndarray
    B: np.ndarray
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.A.shape != (N_STATE, N_STATE) or self.B.shape != (N_STATE, N_CONTROLS):
            raise ModelFormatError(
                f"linear model must be 4x4 / 4x3, got {self.A.shape} / {self.B.shape}"
            )
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ModelFormatError("A and B must be finite")

    @property
    def K(self) -> np.ndarray:
        return self.A

    @property
    def L(self) -> np.ndarray:
        return self.B

    @property
    def dim(self) -> int:
        return N_STATE

    def lift(self, state: WireState, phi: float) -> np.ndarray:
        return state.as_array()


def fit_linear_arrays(S: np.ndarray, U: np.ndarray, S_next: np.ndarray) -> LinearModel:
    A, B = fit_arrays(S, U, S_next)
    return LinearModel(A=A, B=B)


def fit_linear_baseline(trajs: Sequence[Trajectory]) -> LinearModel:
    if not trajs:
        raise DatasetError("empty dataset")
    X, U, Y = trajectories_to_arrays(trajs)
    if X.shape[0] < 1:
        raise DatasetError("dataset has no transitions")
    model = fit_linear_arrays(X[:, :N_STATE], U, Y[:, :N_STATE])
    log.info("fitted linear baseline on %d transitions", X.shape[0])
    return model


def save_linear_model(
    path: Path, model: LinearModel, config_hash: Optional[str] = None
) -> None:
    doc: Dict[str, object] = {
        "kind": "linear",
        "A": model.A.tolist(),
        "B": model.B.tolist(),
        "provenance": dict(model.provenance),
    }
    if config_hash is not None:
        doc["config_hash"] = config_hash
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_linear_model(path: Path) -> LinearModel:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path.name}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "linear":
        raise ModelFormatError(f"{path.name}: not a linear model file")
    try:
        return LinearModel(
            A=np.array(doc["A"], dtype=float),
            B=np.array(doc["B"], dtype=float),
            provenance=dict(doc.get("provenance", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path.name}: {exc}") from exc
