import numpy as np
import pytest

from utils.channel_sim import FasGeometry, GridConfig
from utils.micro_model import MicroModel, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_geom():
    return FasGeometry(n_ports=4, spacing_over_lambda=0.1, elevation_rad=1.0)


@pytest.fixture
def small_grid():
    return GridConfig(n_tx=4, n_doppler=4, n_delay=4)


def random_params(model: MicroModel, rng, scale: float = 0.3):
    """Fill every parameter (LoRA B included) with random values so no gradient is trivially zero"""
    for name, value in model.params.items():
        if name.endswith("_g"):
            model.params[name] = 1.0 + scale * rng.standard_normal(value.shape)
        else:
            model.params[name] = scale * rng.standard_normal(value.shape)
    return model


@pytest.fixture
def tiny_model(rng):
    cfg = ModelConfig(feature_dim=6, d_model=8, n_heads=2, n_layers=1, lora_rank=2, lora_alpha=0.7,
                      horizon=2, past_window=4, ff_mult=2)
    return random_params(MicroModel(cfg, seed=3), rng)


def complex_normal(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
