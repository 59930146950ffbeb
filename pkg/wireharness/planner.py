"""
Waypoint clamp-centrici e merge dei waypoint vicini.

Ogni clamp genera i propri waypoint (C: lato, punta, lato; U: due punti
lungo il canale), poi i waypoint consecutivi vicini alla loro media vengono
fusi in uno solo.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import json
import logging
import math

from .core import Pose2D

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


C_FORCE_N = 7.0
U_FORCE_N = 10.0
MERGE_RADIUS_MM = 20.0

CLAMP_KINDS = ("C", "U")
ROLES = ("C_side_1", "C_tip", "C_side_2", "U_pre", "U_insert")


class PlanError(ValueError):
    """Invalid board or clamp description."""


# ---------------------------------------------------------------------------
# Dataclasses
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ClampGeometry:
    c_side_offset: float = 25.0  # mm, laterale rispetto al centro
    c_tip_length: float = 15.0  # mm, centro -> punta
    c_tip_beyond: float = 25.0  # mm oltre la punta
    u_offset: float = 20.0  # mm, prima e dopo la bocca lungo il canale

    def __post_init__(self) -> None:
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                raise PlanError(f"ClampGeometry.{name} must be >= 0, got {value}")

    def with_overrides(self, overrides: Optional[Dict[str, float]]) -> ClampGeometry:
        if not overrides:
            return self
        for key in overrides:
            if key not in self.__dataclass_fields__:
                raise PlanError(f"unknown clamp geometry key '{key}'")
        return replace(self, **{k: float(v) for k, v in overrides.items()})


@dataclass(frozen=True)
class ClampSpec:
    """
    orientation: direzione della punta per le C, asse del canale per le U
    (rad, frame mondo).
    """

    id: str
    kind: str
    center: Pose2D
    orientation: float
    geometry: ClampGeometry = field(default_factory=ClampGeometry)

    def __post_init__(self) -> None:
        if self.kind not in CLAMP_KINDS:
            raise PlanError(f"unknown clamp kind '{self.kind}' for clamp '{self.id}'")


@dataclass(frozen=True)
class Waypoint:
    """members: punti originali di un waypoint fuso (vuoto se non fuso)."""

    position: Pose2D
    f_d: float
    roles: Tuple[str, ...]
    clamp_ids: Tuple[str, ...]
    members: Tuple[Pose2D, ...] = ()

    @property
    def role(self) -> str:
        return self.roles[0]

    @property
    def clamp_id(self) -> str:
        return self.clamp_ids[0]

    @property
    def member_positions(self) -> Tuple[Pose2D, ...]:
        return self.members or (self.position,)


@dataclass
class BoardLayout:
    connector: Pose2D
    start: Pose2D
    free_length: float
    clamps: Dict[str, ClampSpec]
    routes: Dict[str, List[str]]

    def sequence(self, route: str) -> List[ClampSpec]:
        if route not in self.routes:
            known = ", ".join(sorted(self.routes)) or "none"
            raise PlanError(f"unknown route '{route}' (known: {known})")
        return [self.clamps[cid] for cid in self.routes[route]]


# ---------------------------------------------------------------------------
# Step 1: waypoint per clamp
# ---------------------------------------------------------------------------
def _offset(center: Pose2D, direction: float, distance: float) -> Pose2D:
    return Pose2D(
        center.x + distance * math.cos(direction),
        center.y + distance * math.sin(direction),
    )


def _nearer_first(a: Pose2D, b: Pose2D, ref: Pose2D) -> Tuple[Pose2D, Pose2D]:
    da = a.distance_to(ref)
    db = b.distance_to(ref)
    if abs(da - db) <= 1e-9 * max(1.0, da, db):
        # pareggio: x minore, poi y minore
        return (a, b) if (a.x, a.y) <= (b.x, b.y) else (b, a)
    return (a, b) if da < db else (b, a)


def clamp_waypoints(clamp: ClampSpec, approach_from: Pose2D) -> List[Waypoint]:
    geo = clamp.geometry
    ids = (clamp.id,)
    if clamp.kind == "C":
        normal = clamp.orientation + math.pi / 2.0
        side_a = _offset(clamp.center, normal, geo.c_side_offset)
        side_b = _offset(clamp.center, normal, -geo.c_side_offset)
        first, second = _nearer_first(side_a, side_b, approach_from)
        tip_distance = geo.c_tip_length + geo.c_tip_beyond
        tip = _offset(clamp.center, clamp.orientation, tip_distance)
        return [
            Waypoint(first, C_FORCE_N, ("C_side_1",), ids),
            Waypoint(tip, C_FORCE_N, ("C_tip",), ids),
            Waypoint(second, C_FORCE_N, ("C_side_2",), ids),
        ]
    if clamp.kind == "U":
        before = _offset(clamp.center, clamp.orientation, -geo.u_offset)
        after = _offset(clamp.center, clamp.orientation, geo.u_offset)
        first, second = _nearer_first(before, after, approach_from)
        return [
            Waypoint(first, U_FORCE_N, ("U_pre",), ids),
            Waypoint(second, U_FORCE_N, ("U_insert",), ids),
        ]
    raise PlanError(f"unknown clamp kind '{clamp.kind}'")


def clamp_centric_waypoints(
    board: Sequence[ClampSpec], start: Pose2D
) -> List[Waypoint]:
    """Concatena i waypoint; ogni clamp è approcciato dall'ultimo waypoint."""
    out: List[Waypoint] = []
    current = start
    for clamp in board:
        wps = clamp_waypoints(clamp, current)
        out.extend(wps)
        current = wps[-1].position
    return out


# ---------------------------------------------------------------------------
# Step 2: merge
# ---------------------------------------------------------------------------
def _mean(points: Sequence[Pose2D]) -> Pose2D:
    n = len(points)
    return Pose2D(sum(p.x for p in points) / n, sum(p.y for p in points) / n)


def _within(points: Sequence[Pose2D], radius: float) -> bool:
    m = _mean(points)
    tol = radius + 1e-9 * max(1.0, radius)
    return all(p.distance_to(m) <= tol for p in points)


def _members(group: Sequence[Waypoint]) -> List[Pose2D]:
    return [p for wp in group for p in wp.member_positions]


def _fuse(group: Sequence[Waypoint]) -> Waypoint:
    if len(group) == 1:
        return group[0]
    roles: List[str] = []
    ids: List[str] = []
    for wp in group:
        roles.extend(wp.roles)
        for cid in wp.clamp_ids:
            if cid not in ids:
                ids.append(cid)
    members = _members(group)
    return Waypoint(
        position=_mean(members),
        f_d=max(wp.f_d for wp in group),
        roles=tuple(roles),
        clamp_ids=tuple(ids),
        members=tuple(members),
    )


def merge_waypoints(
    wps: Sequence[Waypoint], radius: float = MERGE_RADIUS_MM
) -> List[Waypoint]:
    """
    Fonde gruppi di waypoint consecutivi i cui punti originali stanno tutti
    entro radius dalla loro media. Un waypoint già fuso porta con sé i suoi
    membri, quindi rifare il merge sull'output non cambia nulla.
    """
    if not wps:
        return []
    out: List[Waypoint] = []
    group: List[Waypoint] = [wps[0]]
    for wp in wps[1:]:
        candidate = group + [wp]
        if _within(_members(candidate), radius):
            group = candidate
        else:
            out.append(_fuse(group))
            group = [wp]
    out.append(_fuse(group))
    return out


def plan(board: Sequence[ClampSpec], start: Pose2D) -> List[Waypoint]:
    if not board:
        raise PlanError("empty board: at least one clamp is required")
    raw = clamp_centric_waypoints(board, start)
    merged = merge_waypoints(raw)
    log.info(
        "plan: %d clamps -> %d waypoints (%d before merge)",
        len(board),
        len(merged),
        len(raw),
    )
    return merged


# ---------------------------------------------------------------------------
# Board file
# ---------------------------------------------------------------------------
def _pose(value: object, what: str) -> Pose2D:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise PlanError(f"{what} must be a [x, y] pair")
    try:
        return Pose2D(float(value[0]), float(value[1]))
    except (TypeError, ValueError) as exc:
        raise PlanError(f"{what}: {exc}") from exc


def board_from_dict(doc: Dict[str, object]) -> BoardLayout:
    for key in ("connector", "start", "free_length", "clamps", "routes"):
        if key not in doc:
            raise PlanError(f"board file is missing '{key}'")

    clamps: Dict[str, ClampSpec] = {}
    raw_clamps = doc["clamps"]
    if not isinstance(raw_clamps, list):
        raise PlanError("'clamps' must be a list")
    for item in raw_clamps:
        if not isinstance(item, dict):
            raise PlanError("each clamp must be an object")
        try:
            cid = str(item["id"])
            clamp = ClampSpec(
                id=cid,
                kind=str(item["kind"]),
                center=_pose(item["center"], f"clamp '{cid}' center"),
                orientation=float(item["orientation"]),
                geometry=ClampGeometry().with_overrides(item.get("geometry")),
            )
        except KeyError as exc:
            raise PlanError(f"clamp entry is missing {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise PlanError(f"invalid clamp entry: {exc}") from exc
        if cid in clamps:
            raise PlanError(f"duplicate clamp id '{cid}'")
        clamps[cid] = clamp

    routes: Dict[str, List[str]] = {}
    raw_routes = doc["routes"]
    if not isinstance(raw_routes, dict):
        raise PlanError("'routes' must be an object")
    for name, seq in raw_routes.items():
        if not isinstance(seq, list):
            raise PlanError(f"route '{name}' must be a list of clamp ids")
        for cid in seq:
            if cid not in clamps:
                raise PlanError(f"route '{name}' references unknown clamp '{cid}'")
        routes[str(name)] = [str(cid) for cid in seq]

    free_length = float(doc["free_length"])  # type: ignore[arg-type]
    if not math.isfinite(free_length) or free_length <= 0.0:
        raise PlanError("free_length must be > 0")

    return BoardLayout(
        connector=_pose(doc["connector"], "connector"),
        start=_pose(doc["start"], "start"),
        free_length=free_length,
        clamps=clamps,
        routes=routes,
    )


def load_board(path: Path) -> BoardLayout:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PlanError(f"{path.name}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise PlanError(f"{path.name}: expected a JSON object")
    return board_from_dict(doc)


def plan_to_dict(wps: Sequence[Waypoint]) -> List[Dict[str, object]]:
    return [
        {
            "x": wp.position.x,
            "y": wp.position.y,
            "f_d": wp.f_d,
            "roles": list(wp.roles),
            "clamp_ids": list(wp.clamp_ids),
        }
        for wp in wps
    ]
