import numpy as np
import pytest
import torch

from genprop.backbone import ModelConfig, NoiseSchedule, VideoDenoiser
from genprop.synthworld import render_scene, sample_scene_spec


def smoke_model_config(**overrides) -> ModelConfig:
    base = dict(
        height=16,
        width=16,
        frames=8,
        patch=4,
        hidden=96,
        blocks=4,
        heads=4,
        sce_blocks=2,
        diffusion_steps=64,
        sample_steps=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def smoke_config() -> ModelConfig:
    return smoke_model_config()


@pytest.fixture(scope="session")
def smoke_backbone(smoke_config) -> VideoDenoiser:
    torch.manual_seed(1234)
    return VideoDenoiser(smoke_config)


@pytest.fixture(scope="session")
def smoke_schedule(smoke_config) -> NoiseSchedule:
    return NoiseSchedule.cosine(smoke_config.diffusion_steps)


@pytest.fixture(scope="session")
def smoke_scenes():
    return [
        render_scene(sample_scene_spec(seed, canvas=(16, 16), frames=8)) for seed in range(24)
    ]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
