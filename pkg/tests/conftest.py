import numpy as np
import pytest

from rail.highway import HighwayConfig, scripted_expert
from rail.training import record_demonstrations


def small_config(**overrides) -> HighwayConfig:
    """Reduced-size environment for fast tests (n = 3 * (2*8+1) = 51)."""
    defaults = dict(ray_count=8, episode_horizon=60, traffic_density=40.0,
                    road_length=600.0)
    defaults.update(overrides)
    return HighwayConfig(**defaults)


@pytest.fixture(scope="session")
def default_config() -> HighwayConfig:
    return HighwayConfig()


@pytest.fixture(scope="session")
def tiny_demos():
    """A handful of expert episodes on the small config, shared per session."""
    cfg = small_config()
    return cfg, record_demonstrations(cfg, scripted_expert, 6, seed=91)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
