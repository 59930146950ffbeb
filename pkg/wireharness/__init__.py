"""
Wire harnessing con Koopman MPC – simulatore, identificazione, controllo e planner.
"""

from .core import ControlCommand, LiftedState, Pose2D, WireState, lift
from .koopman import KoopmanModel, fit, predict_one_step, predict_rollout
from .mpc import MpcConfig, TrackingTarget, solve
from .planner import ClampSpec, Waypoint, plan
from .executive import run_episode
from .sim import SimParams, SimState, scripted_collect, step

__all__ = [
    "ControlCommand",
    "LiftedState",
    "Pose2D",
    "WireState",
    "lift",
    "KoopmanModel",
    "fit",
    "predict_one_step",
    "predict_rollout",
    "MpcConfig",
    "TrackingTarget",
    "solve",
    "ClampSpec",
    "Waypoint",
    "plan",
    "run_episode",
    "SimParams",
    "SimState",
    "scripted_collect",
    "step",
]
