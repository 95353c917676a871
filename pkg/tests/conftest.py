import numpy as np
import pytest

from glab.denoiser import Denoiser, DenoiserConfig
from glab.diffusion import DiffusionConfig, make_linear_schedule


@pytest.fixture(scope="session")
def sched50():
    return make_linear_schedule(DiffusionConfig(timesteps=50))


@pytest.fixture(scope="session")
def sched1000():
    return make_linear_schedule(DiffusionConfig())


@pytest.fixture()
def tiny_image_cfg():
    return DenoiserConfig(
        input_shape=(8, 8, 1),
        num_classes=3,
        patch_size=4,
        embed_dim=16,
        depth=2,
        heads=2,
        time_embed_dim=8,
        mlp_ratio=2,
    )


@pytest.fixture()
def tiny_vector_cfg():
    return DenoiserConfig(
        input_shape=(2,),
        num_classes=4,
        embed_dim=16,
        depth=2,
        heads=2,
        time_embed_dim=8,
        vector_tokens=4,
        mlp_ratio=2,
    )


@pytest.fixture()
def tiny_image_model(tiny_image_cfg):
    return Denoiser.init(tiny_image_cfg, seed=0)


@pytest.fixture()
def tiny_vector_model(tiny_vector_cfg):
    return Denoiser.init(tiny_vector_cfg, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
