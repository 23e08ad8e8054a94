"""Markov-chain car-following (MC-CF): data-driven longitudinal driver model,
parametric baselines, calibration, evaluation metrics and a ring-road simulator."""
from __future__ import annotations

from .inference import InferenceConfig, MCCFFollower, open_loop_rollout
from .persistence import load_model, save_model
from .state_space import ClusterModel, train_model
from .trajdata import CFState, Dataset, TrajectoryPair, parse_trajectory_csv

__version__ = "0.1.0"

__all__ = [
    "CFState", "ClusterModel", "Dataset", "InferenceConfig", "MCCFFollower", "TrajectoryPair",
    "load_model", "open_loop_rollout", "parse_trajectory_csv", "save_model", "train_model",
]
