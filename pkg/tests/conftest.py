import numpy as np
import pytest

from dbplanner.geometry import BevSpec
from dbplanner.model import ModelConfig
from dbplanner.world import ensure_obs, generate_scenario


def compact_config(**overrides) -> ModelConfig:
    """Small model used across tests; fast enough for per-test training."""
    base = dict(width=16, n_agent=4, n_map=6, n_map_points=10,
                samples_per_head=2, n_heads=2, interaction_layers=1,
                fusion_layers=1, bev=BevSpec(resolution=1.5),
                max_offset_cells=3.0)
    base.update(overrides)
    return ModelConfig(**base)


def make_scenarios(seeds, cfg: ModelConfig, **kwargs):
    scs = [generate_scenario(s, n_map=cfg.n_map, n_map_points=cfg.n_map_points,
                             spec=cfg.bev, horizon_steps=cfg.horizon_steps,
                             dt=cfg.dt, **kwargs) for s in seeds]
    ensure_obs(scs, cfg.bev)
    return scs


@pytest.fixture
def rng():
    return np.random.default_rng(0)
