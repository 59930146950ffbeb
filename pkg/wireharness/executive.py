"""
Esecuzione degli episodi di routing sul simulatore.

Loop a passi di 0.5 s: target nel frame del fix-point -> controller ->
simulatore -> verifica guasti -> switch del fix-point -> arrivo al waypoint
e primitive di inserimento.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Set, Tuple

import csv
import logging
import math
import time

import numpy as np

from .core import (
    MAX_TRANSLATION_MM,
    ControlCommand,
    FixPointFrame,
    Pose2D,
    WireState,
    segment_point_distance,
    world_to_fixpoint,
)
from .mpc import (
    CondensedProblem,
    InfeasibleStateError,
    LiftedModel,
    MpcConfig,
    N_STATE,
    PiGains,
    PiMemory,
    SolverError,
    TrackingTarget,
    condense,
    pi_no_twist,
    solve,
)
from .planner import BoardLayout, ClampSpec, Waypoint
from .sim import (
    SimParams,
    SimState,
    initial_state,
    observe,
    step,
    switch_fixpoint,
    true_tension,
)

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


CONTROLLERS = ("koopman_mpc", "linear_mpc", "pi_no_twist")
FAILURE_MODES = ("A", "B", "C", "D")
U_ROLES = ("U_pre", "U_insert")
STEP_LOG_COLUMNS = [
    "t",
    "x",
    "y",
    "theta",
    "f",
    "phi",
    "fix_x",
    "fix_y",
    "waypoint",
    "event",
]


# ---------------------------------------------------------------------------
# Configurazione
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EpisodeConfig:
    timeout_steps: int = 600
    arrival_radius: float = 5.0  # mm
    arrival_force_tol: float = 1.0  # N
    arrival_hold_steps: int = 2
    settle_steps: int = 10
    max_translation: float = 25.0  # mm/step (0.05 m/s)
    primitive_dz: float = 30.0  # mm
    lateral_mm: float = 20.0
    insert_descend_steps: int = 6
    capture_force: float = 6.0  # N
    capture_radius: float = 10.0  # mm
    connector_limit: float = 15.0  # N
    slip_budget: float = 120.0  # mm
    clamp_radius: float = 6.0  # mm
    pi_stretch_limit: float = 4.0  # mm
    # ai waypoint U conta solo la forza: passi concessi dal primo ingresso nel raggio
    u_patience_steps: int = 40

    def with_overrides(self, overrides: Optional[Dict[str, float]]) -> EpisodeConfig:
        if not overrides:
            return self
        values: Dict[str, object] = {}
        for key, value in overrides.items():
            if key not in self.__dataclass_fields__:
                raise ValueError(f"unknown episode parameter '{key}'")
            current = getattr(self, key)
            values[key] = int(value) if isinstance(current, int) else float(value)
        return replace(self, **values)


@dataclass(frozen=True)
class TrackingProtocol:
    """Fix-point nell'origine, gripper in (0, start_y), filo lasco di slack_mm."""

    start_y: float = 100.0
    slack_mm: float = 10.0
    stretch_mm: float = 250.0
    ref_step_mm: float = 2.5
    ref_gain_mm_per_n: float = 2.5
    steps: int = 120


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------
class Controller(Protocol):
    name: str

    def command(
        self, state: WireState, phi: float, target: TrackingTarget
    ) -> ControlCommand:
        ...

    def reset(self) -> None:
        ...


class MpcController:
    """
    MPC su un modello lifted (Koopman 20-D) o sul baseline lineare 4-D.

    Lo stato misurato viene saturato nel box dei bound prima del solve. Per i
    modelli con la coordinata phi il problema è riflesso (y -> -y) quando
    phi < 0: la fisica è simmetrica e il modello vede sempre phi >= 0.
    """

    def __init__(self, model: LiftedModel, cfg: MpcConfig, name: str = "koopman_mpc"):
        self.model = model
        self.cfg = cfg
        self.name = name
        self._condensed: CondensedProblem = condense(model.K, model.L, cfg)
        self._reflect = self._condensed.dim > N_STATE

    def command(
        self, state: WireState, phi: float, target: TrackingTarget
    ) -> ControlCommand:
        state = self.cfg.saturate(state)
        if not (self._reflect and phi < 0.0):
            return solve(self.model, state, phi, target, self.cfg, self._condensed)
        mirrored = WireState(x=state.x, y=-state.y, theta=-state.theta, f=state.f)
        goal = TrackingTarget(target.x_d, -target.y_d, target.f_d)
        u = solve(self.model, mirrored, -phi, goal, self.cfg, self._condensed)
        return ControlCommand(u.dx, -u.dy, -u.dtheta)

    def reset(self) -> None:
        pass


class NoTwistController:
    """
    Inseguimento di posizione proporzionale più stretching PI lungo il raggio.
    Con position_gain=0 è il PI puro usato nel protocollo di tracking.
    """

    def __init__(
        self,
        gains: PiGains = PiGains(),
        position_gain: float = 1.0,
        stretch_limit: Optional[float] = None,
        max_translation: float = MAX_TRANSLATION_MM,
    ):
        self.gains = gains
        self.position_gain = position_gain
        self.stretch_limit = stretch_limit
        self.max_translation = max_translation
        self.memory = PiMemory()
        self.name = "pi_no_twist"

    def command(
        self, state: WireState, phi: float, target: TrackingTarget
    ) -> ControlCommand:
        pi = pi_no_twist(
            state, target, self.gains, self.memory, max_translation=self.max_translation
        )
        sx, sy = pi.dx, pi.dy
        if self.stretch_limit is not None:
            norm = math.hypot(sx, sy)
            if norm > self.stretch_limit:
                sx *= self.stretch_limit / norm
                sy *= self.stretch_limit / norm
        dx = self.position_gain * (target.x_d - state.x) + sx
        dy = self.position_gain * (target.y_d - state.y) + sy
        peak = max(abs(dx), abs(dy))
        if peak > self.max_translation:
            dx *= self.max_translation / peak
            dy *= self.max_translation / peak
        return ControlCommand(dx, dy, 0.0)

    def reset(self) -> None:
        self.memory.reset()


def make_controller(
    name: str,
    model: Optional[LiftedModel] = None,
    mpc_cfg: Optional[MpcConfig] = None,
    gains: PiGains = PiGains(),
    max_translation: float = MAX_TRANSLATION_MM,
    position_gain: float = 1.0,
    stretch_limit: Optional[float] = None,
) -> Controller:
    if name not in CONTROLLERS:
        raise ValueError(f"unknown controller '{name}' (expected one of {CONTROLLERS})")
    if name == "pi_no_twist":
        return NoTwistController(
            gains=gains,
            position_gain=position_gain,
            stretch_limit=stretch_limit,
            max_translation=max_translation,
        )
    if model is None:
        raise ValueError(f"controller '{name}' needs a fitted model")
    cfg = (mpc_cfg or MpcConfig()).with_translation_limit(max_translation)
    return MpcController(model, cfg, name=name)


# ---------------------------------------------------------------------------
# Fix-point switching
# ---------------------------------------------------------------------------
@dataclass
class EpisodeState:
    frame: FixPointFrame
    waypoint_index: int = 0
    prev_cross_sign: int = 0
    captured_clamps: Set[str] = field(default_factory=set)
    phase: str = "following"
    primitive_done: bool = False


def cross_sign(fp: Pose2D, E: Pose2D, C: Pose2D) -> int:
    """Segno della componente z di (E - fp) x (C - E), fp = fix-point corrente."""
    z = (E.x - fp.x) * (C.y - E.y) - (E.y - fp.y) * (C.x - E.x)
    if z > 0.0:
        return 1
    if z < 0.0:
        return -1
    return 0


def should_switch_fixpoint(
    episode: EpisodeState, fp: Pose2D, E: Pose2D, C: Pose2D, clamp_kind: str
) -> bool:
    if clamp_kind == "U":
        return episode.primitive_done
    if clamp_kind != "C":
        raise ValueError(f"unknown clamp kind '{clamp_kind}'")
    if E.distance_to(fp) <= C.distance_to(fp):
        return False
    sign = cross_sign(fp, E, C)
    prev = episode.prev_cross_sign
    return sign != 0 and prev != 0 and sign != prev


# ---------------------------------------------------------------------------
# Primitive
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PrimitiveStep:
    """kind: dz (mm, + verso l'alto), lateral (mm lungo il bordo), dwell, capture."""

    kind: str
    amount: float = 0.0
    duration: int = 1


@dataclass(frozen=True)
class PrimitiveScript:
    name: str
    steps: Tuple[PrimitiveStep, ...]
    maintain_twist: bool = False


def primitive_script(
    kind: str, cfg: EpisodeConfig = EpisodeConfig()
) -> PrimitiveScript:
    dz = cfg.primitive_dz
    if kind == "C_first_side":
        return PrimitiveScript(kind, (PrimitiveStep("dz", -dz),))
    if kind == "C_second_side":
        return PrimitiveScript(kind, (PrimitiveStep("dz", dz),))
    if kind == "U_insert":
        lat = cfg.lateral_mm
        return PrimitiveScript(
            kind,
            (
                PrimitiveStep("dz", -dz, duration=cfg.insert_descend_steps),
                PrimitiveStep("capture"),
                PrimitiveStep("lateral", lat),
                PrimitiveStep("lateral", -lat),
                PrimitiveStep("lateral", -lat),
                PrimitiveStep("lateral", lat),
                PrimitiveStep("dz", dz),
            ),
            maintain_twist=True,
        )
    raise ValueError(f"unknown primitive '{kind}'")


_ROLE_PRIMITIVE = {
    "C_side_1": "C_first_side",
    "C_side_2": "C_second_side",
    "U_insert": "U_insert",
}


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------
@dataclass
class StepRecord:
    t: int
    state: WireState
    phi: float
    fixpoint: Pose2D
    waypoint: int
    event: str = ""


@dataclass
class EpisodeReport:
    route: str
    controller: str
    seed: int
    outcome: str  # success | failure | timeout | error
    failure_mode: Optional[str] = None
    steps: int = 0
    waypoints_reached: int = 0
    captured: List[str] = field(default_factory=list)
    message: Optional[str] = None
    log_csv: Optional[str] = None
    wall_time_s: Optional[float] = None
    config_hash: Optional[str] = None

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def to_dict(self, include_timing: bool = False) -> Dict[str, object]:
        doc: Dict[str, object] = {
            "route": self.route,
            "controller": self.controller,
            "seed": self.seed,
            "outcome": self.outcome,
            "failure_mode": self.failure_mode,
            "steps": self.steps,
            "waypoints_reached": self.waypoints_reached,
            "captured": list(self.captured),
            "message": self.message,
            "log_csv": self.log_csv,
            "config_hash": self.config_hash,
        }
        if include_timing:
            doc["wall_time_s"] = self.wall_time_s
        return doc


@dataclass
class EpisodeResult:
    report: EpisodeReport
    records: List[StepRecord]


def format_failures(reports: Sequence[EpisodeReport]) -> str:
    """Es. "B(10)", "A(2)B(2)D(1)"; "N/A" se nessun fallimento."""
    counts: Dict[str, int] = {}
    for r in reports:
        if r.outcome == "failure" and r.failure_mode:
            key = r.failure_mode
        elif r.outcome == "timeout":
            key = "T"
        elif r.outcome == "error":
            key = "E"
        else:
            continue
        counts[key] = counts.get(key, 0) + 1
    if not counts:
        return "N/A"
    order = list(FAILURE_MODES) + ["T", "E"]
    return "".join(f"{k}({counts[k]})" for k in order if k in counts)


def summary_line(controller: str, route: str, reports: Sequence[EpisodeReport]) -> str:
    ok = sum(1 for r in reports if r.success)
    return f"{controller} {route}: {ok}/{len(reports)} {format_failures(reports)}"


def write_step_log(
    path: Path, records: Sequence[StepRecord], config_hash: Optional[str] = None
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(STEP_LOG_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.t,
                    f"{r.state.x:.6f}",
                    f"{r.state.y:.6f}",
                    f"{r.state.theta:.6f}",
                    f"{r.state.f:.6f}",
                    f"{r.phi:.6f}",
                    f"{r.fixpoint.x:.6f}",
                    f"{r.fixpoint.y:.6f}",
                    r.waypoint,
                    r.event,
                ]
            )


# ---------------------------------------------------------------------------
# Episodio
# ---------------------------------------------------------------------------
class _EpisodeEnd(Exception):
    def __init__(
        self, outcome: str, failure_mode: Optional[str] = None, message: str = ""
    ):
        super().__init__(message or outcome)
        self.outcome = outcome
        self.failure_mode = failure_mode
        self.message = message


class _EpisodeRunner:
    def __init__(
        self,
        board: BoardLayout,
        clamps: Sequence[ClampSpec],
        waypoints: Sequence[Waypoint],
        controller: Controller,
        params: SimParams,
        seed: int,
        cfg: EpisodeConfig,
    ):
        self.board = board
        self.route_ids = [c.id for c in clamps]
        self.waypoints = list(waypoints)
        self.controller = controller
        self.params = params
        self.cfg = cfg
        self.sim: SimState = initial_state(
            board.start, board.connector, board.free_length, rng_seed=seed
        )
        self.obs = observe(self.sim, params)
        self.episode = EpisodeState(frame=FixPointFrame(board.connector))
        self.records: List[StepRecord] = []
        self.z = 0.0
        self._record("start")

    # -- helpers ---------------------------------------------------------
    @property
    def t(self) -> int:
        return self.sim.t

    def _record(self, event: str) -> None:
        self.records.append(
            StepRecord(
                t=self.sim.t,
                state=self.obs,
                phi=self.sim.phi,
                fixpoint=self.sim.fixpoint,
                waypoint=self.episode.waypoint_index,
                event=event,
            )
        )

    def _current_waypoint(self) -> Waypoint:
        return self.waypoints[self.episode.waypoint_index]

    def _target(self, wp: Waypoint) -> TrackingTarget:
        x_d, y_d = world_to_fixpoint(self.episode.frame, wp.position)
        return TrackingTarget(x_d, y_d, wp.f_d)

    def _controller_command(self, target: TrackingTarget) -> ControlCommand:
        try:
            return self.controller.command(self.obs, self.sim.phi, target)
        except (SolverError, InfeasibleStateError) as exc:
            raise _EpisodeEnd("error", message=str(exc)) from exc

    def _advance(self, u: ControlCommand, event: str = "") -> None:
        if self.t >= self.cfg.timeout_steps:
            raise _EpisodeEnd("timeout", message=f"timeout after {self.t} steps")
        self.sim, self.obs = step(self.sim, u, self.params)
        self._record(event)
        self._check_failures()
        self._check_c_switch()

    # -- adjudication ------------------------------------------------------
    def _targeted(self) -> Set[str]:
        if self.episode.waypoint_index >= len(self.waypoints):
            return set()
        return set(self._current_waypoint().clamp_ids)

    def _check_failures(self) -> None:
        cfg = self.cfg
        origin = self.episode.frame.origin
        if origin == self.board.connector:
            f_true = true_tension(self.sim, self.params)
            if f_true > cfg.connector_limit:
                raise _EpisodeEnd(
                    "failure", "C", f"connector pull-out ({f_true:.2f} N)"
                )
        if self.sim.slip_total > cfg.slip_budget:
            raise _EpisodeEnd(
                "failure", "D", f"slip-out ({self.sim.slip_total:.1f} mm slipped)"
            )
        targeted = self._targeted()
        for cid, clamp in self.board.clamps.items():
            if cid in self.episode.captured_clamps or cid in targeted:
                continue
            if clamp.center == origin:
                continue
            d = segment_point_distance(origin, self.sim.gripper, clamp.center)
            if d <= cfg.clamp_radius:
                raise _EpisodeEnd("failure", "A", f"wire crosses clamp '{cid}'")

    def _switch_to(self, clamp: ClampSpec) -> None:
        self.sim = switch_fixpoint(self.sim, clamp.center)
        self.obs = observe(self.sim, self.params)
        self.episode.frame = FixPointFrame(clamp.center)
        self.episode.captured_clamps.add(clamp.id)
        self.episode.prev_cross_sign = 0
        self.episode.primitive_done = False
        self.controller.reset()
        self._record(f"switch:{clamp.id}")
        log.info("t=%d fix-point switched to %s", self.t, clamp.id)

    def _check_c_switch(self) -> None:
        if self.episode.waypoint_index >= len(self.waypoints):
            return
        for cid in self._current_waypoint().clamp_ids:
            clamp = self.board.clamps[cid]
            if clamp.kind != "C" or cid in self.episode.captured_clamps:
                continue
            fp = self.episode.frame.origin
            E = self.sim.gripper
            sign = cross_sign(fp, E, clamp.center)
            if should_switch_fixpoint(self.episode, fp, E, clamp.center, "C"):
                self._switch_to(clamp)
                return
            if sign != 0:
                self.episode.prev_cross_sign = sign

    # -- primitives --------------------------------------------------------
    def _run_primitive(self, kind: str, wp: Waypoint) -> None:
        script = primitive_script(kind, self.cfg)
        want = "U" if kind == "U_insert" else "C"
        matches = [
            self.board.clamps[cid]
            for cid in wp.clamp_ids
            if self.board.clamps[cid].kind == want
        ]
        clamp = matches[0] if kind == "C_first_side" else matches[-1]
        self.episode.phase = "primitive"
        edge = clamp.orientation + math.pi / 2.0
        for ps in script.steps:
            if ps.kind == "dz":
                event = "descend" if ps.amount < 0 else "ascend"
                if script.maintain_twist:
                    per_step = ps.amount / ps.duration
                    for _ in range(ps.duration):
                        u = self._controller_command(self._target(wp))
                        self.z += per_step
                        self._advance(u, f"{event}:{clamp.id}")
                else:
                    self.z += ps.amount
                    self._advance(ControlCommand.zero(), f"{event}:{clamp.id}")
            elif ps.kind == "lateral":
                u = ControlCommand(
                    ps.amount * math.cos(edge), ps.amount * math.sin(edge), 0.0
                )
                self._advance(u, f"lateral:{clamp.id}")
            elif ps.kind == "dwell":
                self._advance(ControlCommand.zero(), "dwell")
            elif ps.kind == "capture":
                self._capture_test(clamp)
        if kind == "U_insert":
            self.episode.primitive_done = True
            fp = self.episode.frame.origin
            E = self.sim.gripper
            if should_switch_fixpoint(self.episode, fp, E, clamp.center, "U"):
                self._switch_to(clamp)
        self.episode.phase = "following"

    def _capture_test(self, clamp: ClampSpec) -> None:
        fp = self.episode.frame.origin
        d = segment_point_distance(fp, self.sim.gripper, clamp.center)
        f_obs = self.obs.f
        if f_obs >= self.cfg.capture_force and d <= self.cfg.capture_radius:
            log.info(
                "t=%d capture of %s ok (f=%.2f N, d=%.1f mm)",
                self.t,
                clamp.id,
                f_obs,
                d,
            )
            self._record(f"capture:{clamp.id}")
            return
        raise _EpisodeEnd(
            "failure",
            "B",
            f"insertion into '{clamp.id}' failed (f={f_obs:.2f} N, d={d:.1f} mm)",
        )

    def _force_not_reached(self, wp: Waypoint) -> None:
        """U_insert senza tensione al target è un fallimento B; U_pre prosegue."""
        u_ids = [cid for cid in wp.clamp_ids if self.board.clamps[cid].kind == "U"]
        cid = u_ids[-1] if u_ids else wp.clamp_id
        if "U_insert" in wp.roles:
            raise _EpisodeEnd(
                "failure",
                "B",
                f"tension target not reached at '{cid}' "
                f"(f={self.obs.f:.2f} N, f_d={wp.f_d:.1f} N)",
            )
        log.warning(
            "t=%d pre-insertion waypoint of %s left below target (f=%.2f N)",
            self.t,
            cid,
            self.obs.f,
        )

    # -- main loop ---------------------------------------------------------
    def _follow(self, wp: Waypoint) -> None:
        cfg = self.cfg
        force_only = any(role in U_ROLES for role in wp.roles)
        force_hold = 0
        settle_hold = 0
        patience: Optional[int] = None
        while True:
            target = self._target(wp)
            u = self._controller_command(target)
            self._advance(u)
            dist = self.sim.gripper.distance_to(wp.position)
            if dist <= cfg.arrival_radius:
                settle_hold += 1
                if patience is None:
                    patience = 0
                if abs(self.obs.f - wp.f_d) <= cfg.arrival_force_tol:
                    force_hold += 1
                else:
                    force_hold = 0
            else:
                settle_hold = 0
                force_hold = 0
            if patience is not None:
                patience += 1
            if force_hold >= cfg.arrival_hold_steps:
                return
            if force_only:
                if patience is not None and patience >= cfg.u_patience_steps:
                    self._force_not_reached(wp)
                    return
                continue
            if settle_hold >= cfg.settle_steps:
                log.warning(
                    "t=%d waypoint %d reached by settle timeout (f=%.2f N, f_d=%.1f N)",
                    self.t,
                    self.episode.waypoint_index,
                    self.obs.f,
                    wp.f_d,
                )
                return

    def run(self) -> Tuple[str, Optional[str], str]:
        try:
            while self.episode.waypoint_index < len(self.waypoints):
                wp = self._current_waypoint()
                self._follow(wp)
                self._record(f"reached:{self.episode.waypoint_index}")
                for role in wp.roles:
                    if role in _ROLE_PRIMITIVE:
                        self._run_primitive(_ROLE_PRIMITIVE[role], wp)
                nxt = self.episode.waypoint_index + 1
                if nxt < len(self.waypoints) and set(
                    self.waypoints[nxt].clamp_ids
                ) != set(wp.clamp_ids):
                    self.episode.prev_cross_sign = 0
                self.episode.waypoint_index = nxt
        except _EpisodeEnd as end:
            self.episode.phase = "failed" if end.outcome != "success" else "done"
            return end.outcome, end.failure_mode, end.message

        captured = self.episode.captured_clamps
        missing = [cid for cid in self.route_ids if cid not in captured]
        self.episode.phase = "done"
        if missing:
            self.episode.phase = "failed"
            return "failure", "B", f"clamps not engaged: {', '.join(missing)}"
        return "success", None, ""


def run_episode(
    board: BoardLayout,
    route: str,
    waypoints: Sequence[Waypoint],
    controller: Controller,
    params: SimParams,
    seed: int,
    cfg: EpisodeConfig = EpisodeConfig(),
) -> EpisodeResult:
    clamps = board.sequence(route)
    started = time.perf_counter()
    if not clamps:
        report = EpisodeReport(
            route=route, controller=controller.name, seed=seed, outcome="success"
        )
        return EpisodeResult(report=report, records=[])

    runner = _EpisodeRunner(board, clamps, waypoints, controller, params, seed, cfg)
    outcome, mode, message = runner.run()
    wall = time.perf_counter() - started
    report = EpisodeReport(
        route=route,
        controller=controller.name,
        seed=seed,
        outcome=outcome,
        failure_mode=mode,
        steps=runner.t,
        waypoints_reached=runner.episode.waypoint_index,
        captured=sorted(runner.episode.captured_clamps),
        message=message or None,
        wall_time_s=wall,
    )
    log.info(
        "episode %s/%s seed=%d: %s%s in %d steps (%.2f s)",
        controller.name,
        route,
        seed,
        outcome,
        f" {mode}" if mode else "",
        runner.t,
        wall,
    )
    return EpisodeResult(report=report, records=runner.records)


def derive_seed(seed: int, *keys: int) -> int:
    """Seed indipendente per (trial, route, ...) a partire dal seed globale."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint32)
    return int(state[0])


# ---------------------------------------------------------------------------
# Protocollo di tension tracking
# ---------------------------------------------------------------------------
@dataclass
class TracePoint:
    t: int
    f: float
    f_d: float
    x: float
    y: float
    theta: float
    phi: float


def run_tension_tracking(
    controller: Controller,
    f_d: float,
    params: SimParams,
    protocol: TrackingProtocol = TrackingProtocol(),
    seed: int = 0,
) -> List[TracePoint]:
    """
    Il riferimento di posizione lungo +Y cede alla forza: parte dalla posizione
    misurata e si sposta di ref_gain_mm_per_n * (f_d - f), al più ref_step_mm
    per passo, senza superare la fine dello stretch. Sotto f_d avanza, sopra
    arretra. Con f_d = 0 resta nel punto di partenza.
    """
    fix = Pose2D(0.0, 0.0)
    sim = initial_state(
        Pose2D(0.0, protocol.start_y),
        fix,
        protocol.start_y + protocol.slack_mm,
        rng_seed=seed,
    )
    obs = observe(sim, params)
    y_end = protocol.start_y + protocol.stretch_mm

    def point(s: SimState, o: WireState) -> TracePoint:
        return TracePoint(s.t, o.f, f_d, o.x, o.y, o.theta, s.phi)

    trace = [point(sim, obs)]
    for _ in range(protocol.steps):
        y_ref = protocol.start_y
        if f_d > 0:
            shift = protocol.ref_gain_mm_per_n * (f_d - obs.f)
            step_mm = protocol.ref_step_mm
            y_ref = min(y_end, obs.y + min(step_mm, max(-step_mm, shift)))
        target = TrackingTarget(0.0, y_ref, f_d)
        u = controller.command(obs, sim.phi, target)
        if sim.gripper.y + u.dy > y_end:
            u = ControlCommand(u.dx, y_end - sim.gripper.y, u.dtheta)
        sim, obs = step(sim, u, params)
        trace.append(point(sim, obs))
    return trace


def run_velocity_sweep(
    make: Callable[[float], Controller],
    f_d: float,
    params: SimParams,
    speeds_mm_s: Sequence[float] = (50.0, 100.0, 150.0),
    rotation_deg_s: float = 6.0,
    protocol: TrackingProtocol = TrackingProtocol(),
    seed: int = 0,
) -> Dict[float, List[TracePoint]]:
    """Una traccia per ogni cap; make(max_translation) costruisce il controller."""
    out: Dict[float, List[TracePoint]] = {}
    for v in speeds_mm_s:
        capped = params.with_velocity_caps(v, rotation_deg_s)
        controller = make(capped.max_translation)
        out[v] = run_tension_tracking(controller, f_d, capped, protocol, seed)
    return out
