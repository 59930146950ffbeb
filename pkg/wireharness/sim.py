"""
Simulatore quasi-statico filo/gripper.

Il filo è ancorato al fix-point e tenuto dal gripper. La tensione segue un
modello ibrido slack/taut; il limite di presa del gripper cresce con la
torsione (capstan) e oltre quel limite il filo scivola nella presa.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import csv
import logging
import math

import numpy as np

from .core import (
    CONTROL_PERIOD_S,
    MAX_ROTATION_RAD,
    MAX_TRANSLATION_MM,
    ControlCommand,
    Pose2D,
    WireState,
    bearing,
    wrap_angle,
)

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


TRAJECTORY_COLUMNS = ["t", "x", "y", "theta", "f", "phi", "dx", "dy", "dtheta"]

# rest length minima dopo uno switch del fix-point
MIN_REST_LENGTH_MM = 1.0


class CsvFormatError(ValueError):
    """Malformed trajectory CSV (message names file and line)."""


# ---------------------------------------------------------------------------
# Dataclasses
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SimParams:
    k_wire: float = 0.2  # N/mm
    f0: float = 4.0  # N, grip cap senza torsione
    mu: float = math.log(3.0) / math.pi  # 1/rad: mezzo giro triplica il cap
    noise_sigma: float = 0.05  # N
    dt: float = CONTROL_PERIOD_S
    max_translation: float = MAX_TRANSLATION_MM
    max_rotation: float = MAX_ROTATION_RAD

    def __post_init__(self) -> None:
        for name in ("k_wire", "f0", "mu", "dt", "max_translation", "max_rotation"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise ValueError(f"SimParams.{name} must be > 0, got {value}")
        if not math.isfinite(self.noise_sigma) or self.noise_sigma < 0.0:
            raise ValueError(
                f"SimParams.noise_sigma must be >= 0, got {self.noise_sigma}"
            )

    def with_overrides(self, overrides: Optional[Dict[str, float]]) -> SimParams:
        if not overrides:
            return self
        known = set(self.__dataclass_fields__)
        for key in overrides:
            if key not in known:
                raise ValueError(f"unknown sim parameter '{key}'")
        return replace(self, **{k: float(v) for k, v in overrides.items()})

    def with_velocity_caps(self, v_mm_s: float, w_deg_s: float) -> SimParams:
        """Bounds per passo derivati da velocità massime (mm/s, deg/s)."""
        return replace(
            self,
            max_translation=v_mm_s * self.dt,
            max_rotation=math.radians(w_deg_s) * self.dt,
        )


@dataclass(frozen=True)
class SimState:
    gripper: Pose2D
    theta: float
    phi: float
    fixpoint: Pose2D
    rest_length: float
    rng_seed: int = 0
    t: int = 0
    slip_total: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.rest_length) or self.rest_length <= 0.0:
            raise ValueError(f"rest_length must be > 0, got {self.rest_length}")
        if not math.isfinite(self.phi):
            raise ValueError("phi must be finite")

    def distance(self) -> float:
        return self.gripper.distance_to(self.fixpoint)


@dataclass
class Trajectory:
    """(s_0, phi_0, u_0, ..., s_T, phi_T): len(states) == len(controls) + 1."""

    states: List[WireState]
    twists: List[float]
    controls: List[ControlCommand]
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.states) < 2:
            raise ValueError("a trajectory needs at least 2 states")
        if len(self.twists) != len(self.states):
            raise ValueError("twists and states must have the same length")
        if len(self.controls) != len(self.states) - 1:
            raise ValueError(
                f"expected {len(self.states) - 1} controls, got {len(self.controls)}"
            )

    def __len__(self) -> int:
        return len(self.controls)


# ---------------------------------------------------------------------------
# Fisica
# ---------------------------------------------------------------------------
def capstan_limit(phi: float, params: SimParams) -> float:
    """Massima tensione trattenuta dalla presa: f0 * exp(mu * |phi|)."""
    return params.f0 * math.exp(params.mu * abs(phi))


def tension(state: SimState, params: SimParams) -> float:
    d = state.distance()
    if d <= state.rest_length:
        return 0.0
    elastic = params.k_wire * (d - state.rest_length)
    return min(elastic, capstan_limit(state.phi, params))


def _noisy_reading(f_true: float, state: SimState, params: SimParams) -> float:
    # filo lasco: il sensore legge zero
    if f_true <= 0.0:
        return 0.0
    if params.noise_sigma == 0.0:
        return f_true
    rng = np.random.default_rng([state.rng_seed, state.t])
    return max(0.0, f_true + params.noise_sigma * float(rng.standard_normal()))


def observe(state: SimState, params: SimParams) -> WireState:
    """Osservazione nel frame del fix-point, con rumore sulla tensione."""
    f_obs = _noisy_reading(tension(state, params), state, params)
    return WireState(
        x=state.gripper.x - state.fixpoint.x,
        y=state.gripper.y - state.fixpoint.y,
        theta=wrap_angle(state.theta),
        f=f_obs,
    )


def initial_state(
    gripper: Pose2D,
    fixpoint: Pose2D,
    rest_length: float,
    theta: float = 0.0,
    phi: float = 0.0,
    rng_seed: int = 0,
) -> SimState:
    return SimState(
        gripper=gripper,
        theta=theta,
        phi=phi,
        fixpoint=fixpoint,
        rest_length=rest_length,
        rng_seed=int(rng_seed),
    )


def step(
    state: SimState, u: ControlCommand, params: SimParams
) -> Tuple[SimState, WireState]:
    """
    Esegue un comando per un periodo di controllo.

    Il twist relativo cambia con la rotazione del gripper meno la rotazione
    del raggio fix-point -> gripper. Se la tensione elastica supera il limite
    di presa, il filo scivola finché le due si eguagliano.
    """
    u.check_bounds(params.max_translation, params.max_rotation)

    beta_old = bearing(state.fixpoint, state.gripper)
    gripper = Pose2D(state.gripper.x + u.dx, state.gripper.y + u.dy)
    beta_new = bearing(state.fixpoint, gripper)
    if gripper.distance_to(state.fixpoint) == 0.0:
        beta_new = beta_old
    d_beta = wrap_angle(beta_new - beta_old)

    phi = state.phi + u.dtheta - d_beta
    theta = state.theta + u.dtheta

    moved = replace(state, gripper=gripper, theta=theta, phi=phi, t=state.t + 1)
    new_state = _settle_grip(moved, params)
    return new_state, observe(new_state, params)


def _settle_grip(state: SimState, params: SimParams) -> SimState:
    """Slip quasi-statico: la rest length cresce finché elastica == cap."""
    d = state.distance()
    if d <= state.rest_length:
        return state
    cap = capstan_limit(state.phi, params)
    if params.k_wire * (d - state.rest_length) <= cap:
        return state
    new_rest = d - cap / params.k_wire
    slip = new_rest - state.rest_length
    log.debug("slip %.3f mm (cap %.3f N)", slip, cap)
    return replace(state, rest_length=new_rest, slip_total=state.slip_total + slip)


def true_tension(state: SimState, params: SimParams) -> float:
    return tension(state, params)


def switch_fixpoint(state: SimState, new_fixpoint: Pose2D) -> SimState:
    """
    Il filo ora è ancorato a new_fixpoint (clamp): la parte libera perde il
    tratto fix-point vecchio -> nuovo.
    """
    consumed = state.fixpoint.distance_to(new_fixpoint)
    rest = max(state.rest_length - consumed, MIN_REST_LENGTH_MM)
    return replace(state, fixpoint=new_fixpoint, rest_length=rest)


# ---------------------------------------------------------------------------
# Raccolta dati scriptata
# ---------------------------------------------------------------------------
_SEGMENTS = ("stretch", "twist", "stretch_twist", "relax")
_SEGMENT_WEIGHTS = (0.3, 0.25, 0.35, 0.1)


def _scripted_command(
    kind: str, state: SimState, rng: np.random.Generator, params: SimParams
) -> ControlCommand:
    beta = bearing(state.fixpoint, state.gripper)
    radial = (math.cos(beta), math.sin(beta))
    tangent = (-radial[1], radial[0])

    step_mm = 0.0
    dtheta = 0.0
    if kind in ("stretch", "stretch_twist"):
        step_mm = rng.uniform(2.0, 8.0)
    elif kind == "relax" and state.distance() > 30.0:
        step_mm = -rng.uniform(2.0, 8.0)
    if kind in ("twist", "stretch_twist"):
        # torsione prevalentemente in verso positivo (il filo si avvolge)
        sign = 1.0 if rng.random() < 0.85 else -1.0
        dtheta = sign * rng.uniform(0.3, 1.0) * params.max_rotation
    jitter = rng.uniform(-1.0, 1.0)

    dx = step_mm * radial[0] + jitter * tangent[0]
    dy = step_mm * radial[1] + jitter * tangent[1]
    return ControlCommand(dx, dy, dtheta)


def scripted_collect(
    n_trajectories: int,
    horizon: int,
    seed: int,
    params: Optional[SimParams] = None,
) -> List[Trajectory]:
    """
    Genera traiettorie alternando segmenti di stretching e twisting a partire
    da stati iniziali casuali. Deterministico dato il seed.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    params = params or SimParams()
    rng = np.random.default_rng(seed)

    trajectories: List[Trajectory] = []
    for k in range(n_trajectories):
        beta0 = rng.uniform(-math.pi, math.pi)
        d0 = rng.uniform(40.0, 350.0)
        # per lo più teso, a volte un po' lasco
        if rng.random() < 0.8:
            rest0 = d0 - rng.uniform(0.0, 10.0)
        else:
            rest0 = d0 + rng.uniform(0.0, 15.0)
        # fino a mezzo giro: cap tra 4 e 12 N
        phi0 = rng.uniform(0.0, math.pi)
        theta0 = wrap_angle(beta0 + phi0)
        state = initial_state(
            gripper=Pose2D(d0 * math.cos(beta0), d0 * math.sin(beta0)),
            fixpoint=Pose2D(0.0, 0.0),
            rest_length=rest0,
            theta=theta0,
            phi=phi0,
            rng_seed=int(rng.integers(0, 2**63 - 1)),
        )
        state = _settle_grip(state, params)
        obs = observe(state, params)

        states = [obs]
        twists = [state.phi]
        controls: List[ControlCommand] = []

        kind = "stretch"
        remaining = 0
        while len(controls) < horizon:
            if remaining == 0:
                kind = str(rng.choice(_SEGMENTS, p=_SEGMENT_WEIGHTS))
                remaining = int(rng.integers(3, 9))
            u = _scripted_command(kind, state, rng, params)
            state, obs = step(state, u, params)
            controls.append(u)
            states.append(obs)
            twists.append(state.phi)
            remaining -= 1

        trajectories.append(
            Trajectory(
                states=states,
                twists=twists,
                controls=controls,
                meta={"index": k, "seed": seed},
            )
        )

    log.info(
        "scripted_collect: %d trajectories x %d steps (seed=%d)",
        n_trajectories,
        horizon,
        seed,
    )
    return trajectories


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------
def _fmt(v: float) -> str:
    return f"{v:.10g}"


def write_trajectory_csv(
    traj: Trajectory, path: Path, config_hash: Optional[str] = None
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_COLUMNS)
        for t, (s, phi) in enumerate(zip(traj.states, traj.twists)):
            row = [str(t), _fmt(s.x), _fmt(s.y), _fmt(s.theta), _fmt(s.f), _fmt(phi)]
            if t < len(traj.controls):
                u = traj.controls[t]
                row += [_fmt(u.dx), _fmt(u.dy), _fmt(u.dtheta)]
            else:
                row += ["", "", ""]
            writer.writerow(row)


def _iter_data_lines(path: Path) -> Iterable[Tuple[int, List[str]]]:
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, next(csv.reader([line]))


def read_trajectory_csv(path: Path) -> Trajectory:
    rows = list(_iter_data_lines(path))
    if not rows:
        raise CsvFormatError(f"{path.name}: empty file")
    header_line, header = rows[0]
    if [h.strip() for h in header] != TRAJECTORY_COLUMNS:
        raise CsvFormatError(
            f"{path.name}:{header_line}: expected header {','.join(TRAJECTORY_COLUMNS)}"
        )

    states: List[WireState] = []
    twists: List[float] = []
    controls: List[ControlCommand] = []
    data = rows[1:]
    for pos, (lineno, parts) in enumerate(data):
        if len(parts) != len(TRAJECTORY_COLUMNS):
            raise CsvFormatError(
                f"{path.name}:{lineno}: expected {len(TRAJECTORY_COLUMNS)} fields, "
                f"got {len(parts)}"
            )
        try:
            x, y, theta, f_val, phi = (float(v) for v in parts[1:6])
            states.append(WireState(x=x, y=y, theta=theta, f=f_val))
            twists.append(phi)
            is_last = pos == len(data) - 1
            ctrl = parts[6:9]
            if is_last and all(c.strip() == "" for c in ctrl):
                continue
            u = ControlCommand(*(float(c) for c in ctrl))
            u.check_bounds()
            controls.append(u)
        except ValueError as exc:
            raise CsvFormatError(f"{path.name}:{lineno}: {exc}") from exc

    try:
        return Trajectory(states=states, twists=twists, controls=controls)
    except ValueError as exc:
        raise CsvFormatError(f"{path.name}: {exc}") from exc


def trajectories_to_arrays(
    trajs: Sequence[Trajectory],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Coppie di transizione (base_t, u_t, base_t+1) senza attraversare i
    confini tra traiettorie. base ha colonne (x, y, theta, f, phi).
    """
    xs: List[np.ndarray] = []
    us: List[np.ndarray] = []
    ys: List[np.ndarray] = []
    for traj in trajs:
        base = np.array(
            [(s.x, s.y, s.theta, s.f, p) for s, p in zip(traj.states, traj.twists)],
            dtype=float,
        )
        ctrl = np.array([u.as_array() for u in traj.controls], dtype=float).reshape(
            -1, 3
        )
        xs.append(base[:-1])
        us.append(ctrl)
        ys.append(base[1:])
    if not xs:
        return np.zeros((0, 5)), np.zeros((0, 3)), np.zeros((0, 5))
    return np.vstack(xs), np.vstack(us), np.vstack(ys)
