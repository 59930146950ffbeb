from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import logging
import math

import numpy as np

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


# ---------------------------------------------------------------------------
# Costanti
# ---------------------------------------------------------------------------
CONTROL_PERIOD_S = 0.5

# velocity caps (0.1 m/s, 6 deg/s) integrati su un periodo di controllo
MAX_TRANSLATION_MM = 50.0
MAX_ROTATION_RAD = math.radians(3.0)

BASE_NAMES = ("x", "y", "theta", "f", "phi")
N_BASE = len(BASE_NAMES)

# Monomi di grado 2 sulle 5 coordinate base, ordine fisso (i <= j):
# (x,x) (x,y) (x,theta) (x,f) (x,phi) (y,y) (y,theta) ... (phi,phi)
MONOMIAL_PAIRS: Tuple[Tuple[int, int], ...] = tuple(
    (i, j) for i in range(N_BASE) for j in range(i, N_BASE)
)
LIFT_DIM = N_BASE + len(MONOMIAL_PAIRS)
LIFT_SPEC = "poly2-xytfp-v1"

_PAIR_I = np.array([p[0] for p in MONOMIAL_PAIRS], dtype=int)
_PAIR_J = np.array([p[1] for p in MONOMIAL_PAIRS], dtype=int)


class CommandBoundsError(ValueError):
    """Control command outside the per-axis motion bounds."""


def wrap_angle(angle: float) -> float:
    """Riporta un angolo in (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def monomial_index(i: int, j: int) -> int:
    """Index in the lifted vector of the product of base coordinates i and j."""
    if i > j:
        i, j = j, i
    return N_BASE + MONOMIAL_PAIRS.index((i, j))


# ---------------------------------------------------------------------------
# Dataclasses
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Pose2D:
    """Punto nel piano (mm), frame mondo."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Pose2D must be finite, got ({self.x}, {self.y})")

    def __add__(self, other: Pose2D) -> Pose2D:
        return Pose2D(self.x + other.x, self.y + other.y)

    def __sub__(self, other: Pose2D) -> Pose2D:
        return Pose2D(self.x - other.x, self.y - other.y)

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def distance_to(self, other: Pose2D) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class WireState:
    """
    Stato del filo nel frame del fix-point: posizione del gripper (mm),
    rotazione attorno a Z (rad) e modulo della tensione (N).
    """

    x: float
    y: float
    theta: float
    f: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.f) or self.f < 0.0:
            raise ValueError(f"tension f must be finite and >= 0, got {self.f}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("WireState position must be finite")
        if not math.isfinite(self.theta):
            raise ValueError("WireState theta must be finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.f], dtype=float)


@dataclass(frozen=True)
class ControlCommand:
    """Incremental motion executed over one 0.5 s control period."""

    dx: float
    dy: float
    dtheta: float

    @classmethod
    def zero(cls) -> ControlCommand:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, u: Sequence[float]) -> ControlCommand:
        return cls(float(u[0]), float(u[1]), float(u[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=float)

    def check_bounds(
        self,
        max_translation: float = MAX_TRANSLATION_MM,
        max_rotation: float = MAX_ROTATION_RAD,
        tol: float = 1e-9,
    ) -> None:
        values = (self.dx, self.dy, self.dtheta)
        if not all(math.isfinite(v) for v in values):
            raise CommandBoundsError(f"non-finite command {values}")
        if abs(self.dx) > max_translation + tol:
            raise CommandBoundsError(
                f"|dx|={abs(self.dx):.6g} mm exceeds {max_translation:.6g} mm"
            )
        if abs(self.dy) > max_translation + tol:
            raise CommandBoundsError(
                f"|dy|={abs(self.dy):.6g} mm exceeds {max_translation:.6g} mm"
            )
        if abs(self.dtheta) > max_rotation + tol:
            raise CommandBoundsError(
                f"|dtheta|={abs(self.dtheta):.6g} rad exceeds {max_rotation:.6g} rad"
            )


@dataclass(frozen=True)
class LiftedState:
    """Observable vector g(s, phi): 5 base coordinates + 15 degree-2 monomials."""

    g: np.ndarray

    @property
    def base(self) -> np.ndarray:
        return self.g[:N_BASE]

    def monomial(self, i: int, j: int) -> float:
        return float(self.g[monomial_index(i, j)])


@dataclass(frozen=True)
class FixPointFrame:
    """Frame con origine nel fix-point, stessi assi del frame mondo."""

    origin: Pose2D


# ---------------------------------------------------------------------------
# Lift
# ---------------------------------------------------------------------------
def lift_array(base: np.ndarray) -> np.ndarray:
    """
    Lift vettoriale: base è (N, 5) con colonne (x, y, theta, f, phi),
    ritorna (N, 20).
    """
    base = np.atleast_2d(np.asarray(base, dtype=float))
    if base.shape[1] != N_BASE:
        raise ValueError(f"expected {N_BASE} base columns, got {base.shape[1]}")
    mono = base[:, _PAIR_I] * base[:, _PAIR_J]
    return np.hstack([base, mono])


def lift(state: WireState, twist: float) -> LiftedState:
    base = np.array([state.x, state.y, state.theta, state.f, float(twist)])
    return LiftedState(g=lift_array(base)[0])


# ---------------------------------------------------------------------------
# Frame transforms
# ---------------------------------------------------------------------------
def world_to_fixpoint(frame: FixPointFrame, world_pose: Pose2D) -> Tuple[float, float]:
    return (world_pose.x - frame.origin.x, world_pose.y - frame.origin.y)


def fixpoint_to_world(frame: FixPointFrame, local: Sequence[float]) -> Pose2D:
    return Pose2D(local[0] + frame.origin.x, local[1] + frame.origin.y)


def bearing(origin: Pose2D, point: Pose2D) -> float:
    """Direzione del raggio origin -> point (rad); 0 se coincidono."""
    dx = point.x - origin.x
    dy = point.y - origin.y
    if dx == 0.0 and dy == 0.0:
        return 0.0
    return math.atan2(dy, dx)


def segment_point_distance(a: Pose2D, b: Pose2D, p: Pose2D) -> float:
    """Distanza minima tra il punto p e il segmento [a, b]."""
    abx = b.x - a.x
    aby = b.y - a.y
    denom = abx * abx + aby * aby
    if denom == 0.0:
        return p.distance_to(a)
    t = ((p.x - a.x) * abx + (p.y - a.y) * aby) / denom
    t = min(1.0, max(0.0, t))
    return math.hypot(a.x + t * abx - p.x, a.y + t * aby - p.y)


def states_to_base(states: List[WireState], twists: Sequence[float]) -> np.ndarray:
    """Impila (x, y, theta, f, phi) per una sequenza di stati."""
    rows = [(s.x, s.y, s.theta, s.f, float(p)) for s, p in zip(states, twists)]
    return np.array(rows, dtype=float).reshape(-1, N_BASE)
