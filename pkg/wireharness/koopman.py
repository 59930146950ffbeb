"""
Identificazione nello spazio lifted (EDMD con controllo).

g(s_{t+1}) ~= K g(s_t) + L u_t, con g = lift polinomiale di grado 2 su
(x, y, theta, f, phi). [K, L] = P G^+ in forma chiusa.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import json
import logging
import math

import numpy as np
import scipy.linalg

from .core import (
    LIFT_DIM,
    LIFT_SPEC,
    ControlCommand,
    LiftedState,
    WireState,
    lift,
    lift_array,
    wrap_angle,
)
from .sim import Trajectory, trajectories_to_arrays

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


# ψ_k = (k - 5) * pi / 5, k = 0..9
AUGMENT_ANGLES: Tuple[float, ...] = tuple((k - 5) * math.pi / 5.0 for k in range(10))

PINV_RTOL = 1e-10
N_CONTROLS = 3


class DatasetError(ValueError):
    """Empty or non-finite identification dataset."""


class ModelFormatError(ValueError):
    """Malformed model file."""


# ---------------------------------------------------------------------------
# Modello
# ---------------------------------------------------------------------------
@dataclass
class KoopmanModel:
    K: np.ndarray
    L: np.ndarray
    lift_spec: str = LIFT_SPEC
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=float)
        self.L = np.asarray(self.L, dtype=float)
        if self.lift_spec != LIFT_SPEC:
            raise ModelFormatError(f"unsupported lift_spec '{self.lift_spec}'")
        if self.K.shape != (LIFT_DIM, LIFT_DIM):
            raise ModelFormatError(
                f"K must be {LIFT_DIM}x{LIFT_DIM}, got {self.K.shape}"
            )
        if self.L.shape != (LIFT_DIM, N_CONTROLS):
            raise ModelFormatError(
                f"L must be {LIFT_DIM}x{N_CONTROLS}, got {self.L.shape}"
            )
        if not (np.all(np.isfinite(self.K)) and np.all(np.isfinite(self.L))):
            raise ModelFormatError("K and L must be finite")

    @property
    def dim(self) -> int:
        return LIFT_DIM

    def lift(self, state: WireState, phi: float) -> np.ndarray:
        return lift(state, phi).g


# ---------------------------------------------------------------------------
# Data augmentation
# ---------------------------------------------------------------------------
def augment(traj: Trajectory, psi: float) -> Trajectory:
    """
    Ruota la traiettoria di psi attorno al fix-point: (x, y) e (dx, dy)
    ruotano, theta trasla di psi; f, phi e dtheta restano invariati.
    """
    c = math.cos(psi)
    s = math.sin(psi)
    states = [
        WireState(
            x=c * st.x - s * st.y,
            y=s * st.x + c * st.y,
            theta=wrap_angle(st.theta + psi),
            f=st.f,
        )
        for st in traj.states
    ]
    controls = [
        ControlCommand(c * u.dx - s * u.dy, s * u.dx + c * u.dy, u.dtheta)
        for u in traj.controls
    ]
    meta = dict(traj.meta)
    meta["psi"] = psi
    return Trajectory(
        states=states, twists=list(traj.twists), controls=controls, meta=meta
    )


def augment_dataset(
    trajs: Sequence[Trajectory], angles: Sequence[float] = AUGMENT_ANGLES
) -> List[Trajectory]:
    out: List[Trajectory] = []
    for traj in trajs:
        for psi in angles:
            out.append(augment(traj, psi))
    log.info("augmented %d -> %d trajectories", len(trajs), len(out))
    return out


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------
def fit_arrays(
    X: np.ndarray, U: np.ndarray, Y: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Minimi quadrati [A, B] = P G^+ per Y ~ X A^T + U B^T.

    Le colonne dei regressori vengono equilibrate (divise per la loro RMS)
    prima della pseudoinversa e la scala viene poi ripristinata.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n_samples = X.shape[0]
    if n_samples < 1:
        raise DatasetError("dataset has no transitions")
    if U.shape[0] != n_samples or Y.shape[0] != n_samples:
        raise DatasetError("X, U, Y must have the same number of rows")
    Z = np.hstack([X, U])
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Y))):
        raise DatasetError("dataset contains non-finite values")

    G = Z.T @ Z / n_samples
    P = Y.T @ Z / n_samples

    scale = np.sqrt(np.diag(G))
    scale[scale == 0.0] = 1.0
    G_eq = G / np.outer(scale, scale)
    P_eq = P / scale[None, :]

    G_pinv, rank = scipy.linalg.pinvh(G_eq, atol=0.0, rtol=PINV_RTOL, return_rank=True)
    if rank < G.shape[0]:
        log.warning("Gram matrix is rank deficient (%d < %d)", rank, G.shape[0])

    M = (P_eq @ G_pinv) / scale[None, :]
    n_state = X.shape[1]
    return M[:, :n_state], M[:, n_state:]


def _transition_arrays(
    trajs: Sequence[Trajectory],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not trajs:
        raise DatasetError("empty dataset")
    X, U, Y = trajectories_to_arrays(trajs)
    if X.shape[0] < 1:
        raise DatasetError("dataset has no transitions")
    return X, U, Y


def fit(trajs: Sequence[Trajectory]) -> KoopmanModel:
    X, U, Y = _transition_arrays(trajs)
    K, L = fit_arrays(lift_array(X), U, lift_array(Y))
    log.info("fitted Koopman model on %d transitions", X.shape[0])
    return KoopmanModel(K=K, L=L)


def one_step_loss(model: KoopmanModel, trajs: Sequence[Trajectory]) -> float:
    """Errore quadratico medio di predizione a un passo nello spazio lifted."""
    X, U, Y = _transition_arrays(trajs)
    GX = lift_array(X)
    GY = lift_array(Y)
    residual = GY - GX @ model.K.T - U @ model.L.T
    return float(np.mean(np.sum(residual * residual, axis=1)))


# ---------------------------------------------------------------------------
# Predizione
# ---------------------------------------------------------------------------
def predict_one_step(
    model: KoopmanModel, state: WireState, phi: float, u: ControlCommand
) -> LiftedState:
    return LiftedState(g=model.K @ lift(state, phi).g + model.L @ u.as_array())


def predict_rollout(
    model: KoopmanModel,
    initial: Tuple[WireState, float],
    controls: Sequence[ControlCommand],
) -> List[LiftedState]:
    """Lift del solo stato iniziale, poi propagazione lineare senza re-lift."""
    g = lift(initial[0], initial[1]).g
    out = [LiftedState(g=g)]
    for u in controls:
        g = model.K @ g + model.L @ u.as_array()
        out.append(LiftedState(g=g))
    return out


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------
def save_model(
    path: Path,
    model: KoopmanModel,
    provenance: Optional[Dict[str, object]] = None,
    config_hash: Optional[str] = None,
) -> None:
    doc: Dict[str, object] = {
        "lift_spec": model.lift_spec,
        "K": model.K.tolist(),
        "L": model.L.tolist(),
        "provenance": dict(provenance if provenance is not None else model.provenance),
    }
    if config_hash is not None:
        doc["config_hash"] = config_hash
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: Path) -> KoopmanModel:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path.name}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path.name}: expected a JSON object")
    for key in ("lift_spec", "K", "L"):
        if key not in doc:
            raise ModelFormatError(f"{path.name}: missing key '{key}'")
    try:
        K = np.array(doc["K"], dtype=float)
        L = np.array(doc["L"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path.name}: {exc}") from exc
    return KoopmanModel(
        K=K,
        L=L,
        lift_spec=str(doc["lift_spec"]),
        provenance=dict(doc.get("provenance", {})),
    )
