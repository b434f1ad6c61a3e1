"""Desk-scale dual-branch BEV driving planner.

Scene/ego decoupled planning with path attention, unidirectional BEV
distillation, autoregressive online mapping, a synthetic BEV world, and an
ego-status perturbation/ablation harness.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .geometry import BevGrid, BevSpec, OrientedRect, bilinear_sample, gwd
from .model import DualBranchPlanner, ModelConfig
from .scene import EgoStatus, MapInstanceSet, Scenario, Trajectory
from .world import generate_scenario, load_dataset, perturb_ego, rasterize, save_dataset

__all__ = [
    "Tensor", "backward", "no_grad",
    "BevGrid", "BevSpec", "OrientedRect", "bilinear_sample", "gwd",
    "DualBranchPlanner", "ModelConfig",
    "EgoStatus", "MapInstanceSet", "Scenario", "Trajectory",
    "generate_scenario", "load_dataset", "perturb_ego", "rasterize", "save_dataset",
]
