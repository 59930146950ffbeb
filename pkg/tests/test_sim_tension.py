from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from wireharness.core import CommandBoundsError, ControlCommand, Pose2D
from wireharness.sim import (
    CsvFormatError,
    SimParams,
    capstan_limit,
    initial_state,
    observe,
    read_trajectory_csv,
    scripted_collect,
    step,
    switch_fixpoint,
    tension,
    trajectories_to_arrays,
    write_trajectory_csv,
)

QUIET = SimParams(noise_sigma=0.0)


def _state(d: float, rest: float, phi: float = 0.0, seed: int = 0):
    return initial_state(
        Pose2D(d, 0.0), Pose2D(0.0, 0.0), rest, theta=phi, phi=phi, rng_seed=seed
    )


def test_slack_wire_reads_exactly_zero():
    s = _state(100.0, 110.0)
    assert tension(s, SimParams()) == 0.0
    # anche con rumore il sensore non vede nulla
    assert observe(s, SimParams(noise_sigma=1.0)).f == 0.0


def test_taut_tension_is_elastic_below_cap():
    s = _state(100.0, 95.0)
    assert tension(s, QUIET) == pytest.approx(1.0)
    assert observe(s, QUIET).f == pytest.approx(1.0)


def test_capstan_limit_grows_with_twist():
    assert capstan_limit(0.0, QUIET) == pytest.approx(4.0)
    # mezzo giro triplica il limite
    assert capstan_limit(math.pi, QUIET) == pytest.approx(12.0)
    assert capstan_limit(-math.pi, QUIET) == pytest.approx(12.0)


def test_stretch_without_twist_slips_at_cap():
    s = _state(100.0, 99.0)
    for _ in range(5):
        s, obs = step(s, ControlCommand(20.0, 0.0, 0.0), QUIET)
    assert obs.f == pytest.approx(4.0)
    assert s.slip_total > 0.0
    # elastica == cap dopo lo slip
    assert QUIET.k_wire * (s.distance() - s.rest_length) == pytest.approx(4.0)


def test_twisted_grip_holds_more_tension():
    plain = _state(100.0, 99.0)
    twisted = _state(100.0, 99.0, phi=math.pi)
    u = ControlCommand(40.0, 0.0, 0.0)
    plain, obs_plain = step(plain, u, QUIET)
    twisted, obs_twisted = step(twisted, u, QUIET)
    assert obs_plain.f == pytest.approx(4.0)
    assert obs_twisted.f == pytest.approx(QUIET.k_wire * 41.0)
    assert twisted.slip_total == 0.0


def test_twist_follows_gripper_rotation_minus_bearing():
    s = _state(100.0, 100.0)
    s, _ = step(s, ControlCommand(0.0, 0.0, 0.05), QUIET)
    assert s.phi == pytest.approx(0.05)

    # moto tangenziale: il raggio ruota, il twist relativo diminuisce
    s2 = _state(100.0, 100.0)
    s2, _ = step(s2, ControlCommand(0.0, 10.0, 0.0), QUIET)
    assert s2.phi == pytest.approx(-math.atan2(10.0, 100.0))
    assert s2.theta == 0.0


def test_step_rejects_out_of_bounds_commands():
    s = _state(100.0, 100.0)
    with pytest.raises(CommandBoundsError):
        step(s, ControlCommand(60.0, 0.0, 0.0), QUIET)


def test_noise_is_reproducible_per_seed():
    a = _state(100.0, 95.0, seed=3)
    b = _state(100.0, 95.0, seed=3)
    params = SimParams(noise_sigma=0.2)
    assert observe(a, params).f == observe(b, params).f


def test_switch_fixpoint_consumes_free_length():
    s = _state(100.0, 100.0)
    moved = switch_fixpoint(s, Pose2D(30.0, 40.0))
    assert moved.fixpoint == Pose2D(30.0, 40.0)
    assert moved.rest_length == pytest.approx(50.0)
    tiny = switch_fixpoint(_state(10.0, 5.0), Pose2D(100.0, 0.0))
    assert tiny.rest_length == pytest.approx(1.0)


def test_scripted_collect_is_deterministic():
    a = scripted_collect(3, 15, seed=11)
    b = scripted_collect(3, 15, seed=11)
    assert len(a) == 3
    for ta, tb in zip(a, b):
        assert len(ta) == 15
        assert ta.states == tb.states
        assert ta.controls == tb.controls
        assert ta.twists == tb.twists


def test_scripted_collect_respects_bounds_and_tension_sign():
    params = SimParams()
    for traj in scripted_collect(4, 30, seed=5, params=params):
        for u in traj.controls:
            u.check_bounds(params.max_translation, params.max_rotation)
        assert all(s.f >= 0.0 for s in traj.states)


def test_trajectories_to_arrays_keeps_boundaries():
    trajs = scripted_collect(3, 10, seed=1)
    X, U, Y = trajectories_to_arrays(trajs)
    assert X.shape == (30, 5)
    assert U.shape == (30, 3)
    assert Y.shape == (30, 5)
    # la prima transizione della seconda traiettoria parte dal suo stato iniziale
    first = trajs[1].states[0]
    assert np.allclose(X[10, :4], first.as_array())
    assert np.allclose(Y[9, :4], trajs[0].states[-1].as_array())


def test_trajectory_csv_roundtrip(tmp_path: Path):
    traj = scripted_collect(1, 12, seed=2)[0]
    path = tmp_path / "traj_000.csv"
    write_trajectory_csv(traj, path, config_hash="abc123")

    assert path.read_text(encoding="utf-8").startswith("# config_hash=abc123")
    back = read_trajectory_csv(path)
    assert len(back) == len(traj)
    assert back.states[5].f == pytest.approx(traj.states[5].f)
    assert back.controls[3].dtheta == pytest.approx(traj.controls[3].dtheta)


def test_malformed_csv_names_file_and_line(tmp_path: Path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "t,x,y,theta,f,phi,dx,dy,dtheta\n"
        "0,1,2,0,1,0,1,1,0\n"
        "1,1,2,0,oops,0,,,\n",
        encoding="utf-8",
    )
    with pytest.raises(CsvFormatError) as exc:
        read_trajectory_csv(path)
    assert "bad.csv:3" in str(exc.value)


def test_csv_with_wrong_header_is_rejected(tmp_path: Path):
    path = tmp_path / "hdr.csv"
    path.write_text("a,b,c\n1,2,3\n", encoding="utf-8")
    with pytest.raises(CsvFormatError):
        read_trajectory_csv(path)


def test_csv_controls_out_of_bounds_are_rejected(tmp_path: Path):
    path = tmp_path / "fast.csv"
    path.write_text(
        "# config_hash=x\n"
        "t,x,y,theta,f,phi,dx,dy,dtheta\n"
        "0,100,0,0,1,0,2,0,0.01\n"
        "1,102,0,0,1.4,0.01,500,0,0\n"
        "2,602,0,0,4,0.01,,,\n",
        encoding="utf-8",
    )
    with pytest.raises(CsvFormatError) as exc:
        read_trajectory_csv(path)
    assert "fast.csv:4" in str(exc.value)
    assert "dx" in str(exc.value)


def test_scripted_initial_twist_spans_half_a_turn():
    trajs = scripted_collect(60, 1, seed=11)
    start = [t.twists[0] for t in trajs]
    assert min(start) >= 0.0
    assert max(start) <= math.pi
    # il dataset copre cap oltre i 10 N del target U
    assert max(capstan_limit(p, SimParams()) for p in start) > 10.0
