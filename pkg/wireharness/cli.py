# wireharness/cli.py
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .executive import (
    CONTROLLERS,
    EpisodeConfig,
    EpisodeReport,
    TracePoint,
    TrackingProtocol,
    derive_seed,
    format_failures,
    make_controller,
    run_episode,
    run_tension_tracking,
    run_velocity_sweep,
    summary_line,
    write_step_log,
)
from .koopman import (
    AUGMENT_ANGLES,
    DatasetError,
    ModelFormatError,
    augment_dataset,
    fit,
    load_model,
    save_model,
)
from .mpc import (
    InfeasibleStateError,
    LiftedModel,
    MpcConfig,
    PiGains,
    SolverError,
    fit_linear_baseline,
    load_linear_model,
    save_linear_model,
)
from .planner import BoardLayout, PlanError, Waypoint, load_board, plan, plan_to_dict
from .sim import (
    CsvFormatError,
    SimParams,
    read_trajectory_csv,
    scripted_collect,
    write_trajectory_csv,
)

log = logging.getLogger(__name__)

SWEEP_SPEEDS_MM_S = (50.0, 100.0, 150.0)
TRACE_COLUMNS = ["t", "f", "f_d", "x", "y", "theta", "phi"]


class UsageError(ValueError):
    """Bad command line or configuration."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------
@dataclass
class RunConfig:
    board: Optional[str] = None
    controller: str = "koopman_mpc"
    model: Optional[str] = None
    seed: int = 0
    sim: Dict[str, float] = field(default_factory=dict)
    mpc: Dict[str, object] = field(default_factory=dict)
    episode: Dict[str, float] = field(default_factory=dict)
    out: str = "out"

    @classmethod
    def from_dict(cls, doc: Dict[str, object]) -> RunConfig:
        known = set(cls.__dataclass_fields__)
        for key in doc:
            if key not in known:
                raise UsageError(f"unknown config key '{key}'")
        return cls(**doc)  # type: ignore[arg-type]

    def validate(self) -> None:
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise UsageError(f"seed must be an unsigned 64-bit int, got {self.seed}")
        if self.controller not in CONTROLLERS:
            raise UsageError(
                f"unknown controller '{self.controller}' (expected {CONTROLLERS})"
            )

    def hashed(self, **extra: object) -> str:
        """Hash della configurazione effettiva (senza la directory di output)."""
        doc = asdict(self)
        doc.pop("out", None)
        doc.update(extra)
        return config_hash(doc)

    def sim_params(self) -> SimParams:
        try:
            return SimParams().with_overrides(self.sim)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc

    def mpc_config(self) -> MpcConfig:
        try:
            return MpcConfig().with_overrides(self.mpc)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc

    def episode_config(self) -> EpisodeConfig:
        try:
            return EpisodeConfig().with_overrides(self.episode)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc


def config_hash(doc: Dict[str, object]) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path.name}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"{path.name}: expected a JSON object")
        cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    for name in ("board", "controller", "model"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.validate()
    return cfg


def _dump_json(path: Path, doc: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require_file(value: Optional[str], what: str) -> Path:
    if not value:
        raise UsageError(f"{what} is required")
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_board(cfg: RunConfig) -> BoardLayout:
    return load_board(_require_file(cfg.board, "board file"))


def _load_controller_model(cfg: RunConfig) -> Optional[LiftedModel]:
    if cfg.controller == "pi_no_twist":
        return None
    path = _require_file(cfg.model, f"model file for {cfg.controller}")
    if cfg.controller == "linear_mpc":
        return load_linear_model(path)
    return load_model(path)


# ---------------------------------------------------------------------------
# collect
# ---------------------------------------------------------------------------
def cli_collect(args: argparse.Namespace, cfg: RunConfig) -> None:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    if args.horizon < 1:
        raise UsageError(f"--horizon must be >= 1, got {args.horizon}")
    params = cfg.sim_params()
    chash = cfg.hashed(command="collect", n=args.n, horizon=args.horizon)

    trajs = scripted_collect(args.n, args.horizon, cfg.seed, params)
    out = Path(cfg.out)
    files: List[str] = []
    for i, traj in enumerate(trajs):
        name = f"traj_{i:03d}.csv"
        write_trajectory_csv(traj, out / name, config_hash=chash)
        files.append(name)

    _dump_json(
        out / "manifest.json",
        {
            "config_hash": chash,
            "seed": cfg.seed,
            "n_trajectories": len(trajs),
            "horizon": args.horizon,
            "sim_params": asdict(params),
            "files": files,
        },
    )
    print(f"collect: {len(trajs)} trajectories -> {out}")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------
def cli_fit(args: argparse.Namespace, cfg: RunConfig) -> None:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"dataset directory not found: {data_dir}")
    paths = sorted(data_dir.glob("*.csv"))
    if not paths:
        raise DatasetError(f"no trajectory CSV files in {data_dir}")

    source: Dict[str, object] = {}
    manifest = data_dir / "manifest.json"
    if manifest.is_file():
        try:
            source = json.loads(manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{manifest}: invalid JSON ({exc})") from exc

    trajs = [read_trajectory_csv(p) for p in paths]
    factor = len(AUGMENT_ANGLES) if args.augment else 1
    if args.augment:
        trajs = augment_dataset(trajs)

    chash = cfg.hashed(
        command="fit",
        kind=args.kind,
        augment=bool(args.augment),
        source_hash=source.get("config_hash"),
        files=[p.name for p in paths],
    )
    provenance = {
        "seed": source.get("seed"),
        "source_trajectories": len(paths),
        "augmentation_factor": factor,
        "effective_trajectories": len(trajs),
        "source_config_hash": source.get("config_hash"),
    }

    out = Path(cfg.out)
    if args.kind == "linear":
        linear = fit_linear_baseline(trajs)
        linear.provenance = provenance
        target = out / "linear_model.json"
        save_linear_model(target, linear, config_hash=chash)
    else:
        model = fit(trajs)
        target = out / "model.json"
        save_model(target, model, provenance=provenance, config_hash=chash)
    print(
        f"fit: {args.kind} model from {len(paths)} trajectories "
        f"({len(trajs)} effective) -> {target}"
    )


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------
def _write_trace(path: Path, trace: Sequence[TracePoint], chash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        f.write(f"# config_hash={chash}\n")
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for p in trace:
            writer.writerow(
                [
                    p.t,
                    f"{p.f:.6f}",
                    f"{p.f_d:g}",
                    f"{p.x:.6f}",
                    f"{p.y:.6f}",
                    f"{p.theta:.6f}",
                    f"{p.phi:.6f}",
                ]
            )


def cli_track(args: argparse.Namespace, cfg: RunConfig) -> None:
    if args.f_d < 0:
        raise UsageError(f"--f-d must be >= 0, got {args.f_d}")
    if args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    params = cfg.sim_params()
    mpc_cfg = cfg.mpc_config()
    model = _load_controller_model(cfg)
    protocol = TrackingProtocol(stretch_mm=args.stretch_mm, steps=args.steps)

    def make(max_translation: float):
        return make_controller(
            cfg.controller,
            model=model,
            mpc_cfg=mpc_cfg,
            max_translation=max_translation,
            position_gain=0.0,
        )

    chash = cfg.hashed(
        command="track",
        f_d=args.f_d,
        stretch_mm=args.stretch_mm,
        steps=args.steps,
        velocity_sweep=bool(args.velocity_sweep),
    )
    out = Path(cfg.out)
    stem = f"track_{cfg.controller}_f{args.f_d:g}"

    if args.velocity_sweep:
        traces = run_velocity_sweep(
            make, args.f_d, params, SWEEP_SPEEDS_MM_S, protocol=protocol, seed=cfg.seed
        )
        for v, trace in traces.items():
            path = out / f"{stem}_v{v / 1000.0:g}.csv"
            _write_trace(path, trace, chash)
            print(f"track: v={v / 1000.0:g} m/s final f={trace[-1].f:.2f} N -> {path}")
        return

    trace = run_tension_tracking(
        make(params.max_translation), args.f_d, params, protocol, seed=cfg.seed
    )
    path = out / f"{stem}.csv"
    _write_trace(path, trace, chash)
    tail = trace[-20:]
    mean_f = sum(p.f for p in tail) / len(tail)
    print(
        f"track: {cfg.controller} f_d={args.f_d:g} N "
        f"steady f={mean_f:.2f} N -> {path}"
    )


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------
def _routes(board: BoardLayout, route: Optional[str]) -> List[str]:
    if route is None:
        return sorted(board.routes)
    if route not in board.routes:
        raise UsageError(f"unknown route '{route}'")
    return [route]


def cli_plan(args: argparse.Namespace, cfg: RunConfig) -> None:
    board = _load_board(cfg)
    chash = cfg.hashed(command="plan", route=args.route)
    doc: Dict[str, object] = {"config_hash": chash, "routes": {}}
    for name in _routes(board, args.route):
        wps = plan(board.sequence(name), board.start)
        doc["routes"][name] = plan_to_dict(wps)  # type: ignore[index]
        print(f"route {name}: {len(wps)} waypoints")
        for i, wp in enumerate(wps):
            roles = "+".join(wp.roles)
            print(
                f"  {i:2d} ({wp.position.x:8.2f}, {wp.position.y:8.2f}) "
                f"f_d={wp.f_d:4.1f} N  {roles}"
            )
    _dump_json(Path(cfg.out) / "plan.json", doc)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------
@dataclass
class TrialTask:
    board: BoardLayout
    route: str
    waypoints: List[Waypoint]
    controller: str
    model: Optional[LiftedModel]
    mpc_cfg: MpcConfig
    params: SimParams
    episode_cfg: EpisodeConfig
    seed: int
    out_dir: str
    stem: str
    config_hash: str
    timing: bool


def _run_trial(task: TrialTask) -> EpisodeReport:
    """Eseguito anche nei worker: scrive report e step log del proprio trial."""
    controller = make_controller(
        task.controller,
        model=task.model,
        mpc_cfg=task.mpc_cfg,
        gains=PiGains(),
        max_translation=task.episode_cfg.max_translation,
        position_gain=1.0,
        stretch_limit=task.episode_cfg.pi_stretch_limit,
    )
    result = run_episode(
        task.board,
        task.route,
        task.waypoints,
        controller,
        task.params,
        task.seed,
        task.episode_cfg,
    )
    out = Path(task.out_dir)
    log_name = f"{task.stem}.csv"
    write_step_log(out / log_name, result.records, task.config_hash)
    report = result.report
    report.log_csv = log_name
    report.config_hash = task.config_hash
    _dump_json(out / f"{task.stem}.json", report.to_dict(include_timing=task.timing))
    return report


def cli_run(args: argparse.Namespace, cfg: RunConfig) -> None:
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    if args.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
    board = _load_board(cfg)
    routes = _routes(board, args.route)
    params = cfg.sim_params()
    mpc_cfg = cfg.mpc_config()
    episode_cfg = cfg.episode_config()
    model = _load_controller_model(cfg)
    chash = cfg.hashed(
        command="run",
        trials=args.trials,
        route=args.route,
        multi_wire=bool(args.multi_wire),
    )

    plans = {}
    for name in routes:
        seq = board.sequence(name)
        plans[name] = plan(seq, board.start) if seq else []

    out = Path(cfg.out) / cfg.controller
    tasks: List[TrialTask] = []
    for trial in range(args.trials):
        for r_idx, name in enumerate(routes):
            tasks.append(
                TrialTask(
                    board=board,
                    route=name,
                    waypoints=plans[name],
                    controller=cfg.controller,
                    model=model,
                    mpc_cfg=mpc_cfg,
                    params=params,
                    episode_cfg=episode_cfg,
                    seed=derive_seed(cfg.seed, trial, r_idx),
                    out_dir=str(out / name),
                    stem=f"trial_{trial:03d}",
                    config_hash=chash,
                    timing=bool(args.timing),
                )
            )

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_run_trial, tasks))
    else:
        reports = [_run_trial(t) for t in tasks]

    by_route: Dict[str, List[EpisodeReport]] = {name: [] for name in routes}
    for report in reports:
        by_route[report.route].append(report)

    summary: Dict[str, object] = {
        "config_hash": chash,
        "controller": cfg.controller,
        "trials": args.trials,
        "routes": {
            name: {
                "successes": sum(1 for r in rs if r.success),
                "trials": len(rs),
                "failures": format_failures(rs),
                "outcomes": [r.outcome for r in rs],
                "failure_modes": [r.failure_mode for r in rs],
            }
            for name, rs in by_route.items()
        },
    }
    for name, rs in by_route.items():
        print(summary_line(cfg.controller, name, rs))

    if args.multi_wire:
        n_routes = len(routes)
        wins = 0
        for trial in range(args.trials):
            chunk = reports[trial * n_routes : (trial + 1) * n_routes]
            if all(r.success for r in chunk):
                wins += 1
        summary["multi_wire"] = {"successes": wins, "trials": args.trials}
        print(f"{cfg.controller} multi-wire: {wins}/{args.trials}")

    _dump_json(out / "summary.json", summary)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------
def build_arg_parser() -> argparse.ArgumentParser:
    p = _ArgumentParser(
        prog="wireharness",
        description="Koopman MPC wire harnessing on a simulated board",
    )
    p.add_argument("--seed", type=int, default=None, help="global random seed")
    p.add_argument("--config", type=str, default=None, help="JSON run config")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v INFO, -vv DEBUG"
    )
    sub = p.add_subparsers(dest="command")

    # collect
    p_col = sub.add_parser("collect", help="scripted data collection on the simulator")
    p_col.add_argument("--n", type=int, default=40, help="number of trajectories")
    p_col.add_argument("--horizon", type=int, default=60, help="steps per trajectory")
    p_col.set_defaults(func=cli_collect)

    # fit
    p_fit = sub.add_parser("fit", help="fit a model from trajectory CSVs")
    p_fit.add_argument("data", type=str, help="directory with trajectory CSVs")
    p_fit.add_argument(
        "--augment", action="store_true", help="10x rotation augmentation"
    )
    p_fit.add_argument(
        "--kind", choices=("koopman", "linear"), default="koopman", help="model type"
    )
    p_fit.set_defaults(func=cli_fit)

    # track
    p_trk = sub.add_parser("track", help="tension tracking protocol")
    p_trk.add_argument("--model", type=str, default=None, help="model JSON")
    p_trk.add_argument("--controller", choices=CONTROLLERS, default=None)
    p_trk.add_argument("--f-d", dest="f_d", type=float, default=10.0, help="N")
    p_trk.add_argument("--stretch-mm", type=float, default=250.0)
    p_trk.add_argument("--steps", type=int, default=120)
    p_trk.add_argument(
        "--velocity-sweep",
        action="store_true",
        help="one trace per velocity cap (0.05, 0.1, 0.15 m/s)",
    )
    p_trk.set_defaults(func=cli_track)

    # plan
    p_pln = sub.add_parser("plan", help="clamp-centric waypoint plan")
    p_pln.add_argument("--board", type=str, default=None, help="board JSON")
    p_pln.add_argument("--route", type=str, default=None)
    p_pln.set_defaults(func=cli_plan)

    # run
    p_run = sub.add_parser("run", help="routing episodes on the simulator")
    p_run.add_argument("--board", type=str, default=None, help="board JSON")
    p_run.add_argument("--model", type=str, default=None, help="model JSON")
    p_run.add_argument("--controller", choices=CONTROLLERS, default=None)
    p_run.add_argument("--route", type=str, default=None)
    p_run.add_argument("--trials", type=int, default=1)
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--multi-wire", action="store_true")
    p_run.add_argument(
        "--timing", action="store_true", help="include wall time in reports"
    )
    p_run.set_defaults(func=cli_run)

    return p


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )


def main(argv: List[str] | None = None) -> int:
    parser = build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _configure_logging(args.verbose)
    if not hasattr(args, "func"):
        parser.print_help()
        return 1
    try:
        cfg = _load_config(args)
        args.func(args, cfg)
    except (UsageError, PlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        SolverError,
        InfeasibleStateError,
        CsvFormatError,
        DatasetError,
        ModelFormatError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
