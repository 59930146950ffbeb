from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import pytest

from wireharness.executive import (
    EpisodeConfig,
    EpisodeReport,
    derive_seed,
    make_controller,
    run_episode,
)
from wireharness.mpc import MpcConfig, PiGains
from wireharness.planner import load_board, plan
from wireharness.sim import SimParams

REPO_ROOT = Path(__file__).resolve().parents[1]
BOARD = REPO_ROOT / "data" / "boards" / "reference.json"
TRIALS = 10


def _run_trials(name: str, model=None) -> Dict[str, List[EpisodeReport]]:
    """Stessi controller, seed e piani del comando run con --trials 10."""
    board = load_board(BOARD)
    cfg = EpisodeConfig()
    out: Dict[str, List[EpisodeReport]] = {}
    for r_idx, route in enumerate(sorted(board.routes)):
        wps = plan(board.sequence(route), board.start)
        reports = []
        for trial in range(TRIALS):
            controller = make_controller(
                name,
                model=model,
                mpc_cfg=MpcConfig(),
                gains=PiGains(),
                max_translation=cfg.max_translation,
                position_gain=1.0,
                stretch_limit=cfg.pi_stretch_limit,
            )
            result = run_episode(
                board,
                route,
                wps,
                controller,
                SimParams(),
                derive_seed(0, trial, r_idx),
                cfg,
            )
            reports.append(result.report)
        out[route] = reports
    return out


def _successes(reports: List[EpisodeReport]) -> int:
    return sum(1 for r in reports if r.success)


@pytest.fixture(scope="module")
def koopman_reports(reference_model):
    return _run_trials("koopman_mpc", reference_model)


def test_no_twist_pi_always_fails_insertion():
    for route, reports in _run_trials("pi_no_twist").items():
        assert [r.outcome for r in reports] == ["failure"] * TRIALS, route
        assert [r.failure_mode for r in reports] == ["B"] * TRIALS, route
        assert all(f"U_{route}" not in r.captured for r in reports)


def test_koopman_mpc_routes_both_sides(koopman_reports):
    for route, reports in koopman_reports.items():
        assert _successes(reports) >= 9, [r.message for r in reports]
        # nessun errore del solver né stato fuori dai bound
        assert all(r.outcome != "error" for r in reports)


def test_linear_mpc_is_worse_than_koopman(koopman_reports, reference_linear_model):
    linear = _run_trials("linear_mpc", reference_linear_model)
    ok_linear = sum(_successes(r) for r in linear.values())
    ok_koopman = sum(_successes(r) for r in koopman_reports.values())
    assert ok_linear < ok_koopman

