"""Shared fixtures: tiny model/training configs and seeded generators."""

import numpy as np
import pytest

from switchdit.config import ModelConfig, ScheduleConfig, TrainConfig
from switchdit.network import SwitchDiT


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        image_size=8,
        patch_size=4,
        hidden_size=16,
        frequency_dim=16,
        depth=2,
        num_heads=2,
        mlp_ratio=2.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train_config(model=None, timesteps: int = 10, **overrides) -> TrainConfig:
    base = dict(
        dataset_size=64,
        batch_size=8,
        steps=6,
        log_every=5,
        ema_every_eval=2,
        model=model if model is not None else tiny_model_config(),
        schedule=ScheduleConfig(timesteps=timesteps),
    )
    base.update(overrides)
    return TrainConfig(**base)


def randomize(model, rng, skip=(), std=0.1):
    """Overwrite parameters with Gaussian noise, leaving names containing any of `skip` alone."""
    for name, p in model.named_parameters():
        if any(s in name for s in skip):
            continue
        p.data[...] = rng.normal(0.0, std, size=p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model_cfg():
    return tiny_model_config()


@pytest.fixture
def train_cfg():
    return tiny_train_config()


@pytest.fixture
def tiny_model(model_cfg):
    return SwitchDiT(model_cfg, timesteps=10, seed=0)
