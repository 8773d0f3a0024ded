import numpy as np
import pytest
import torch

from uwdiff.denoiser import DenoiserConfig
from uwdiff.synthetic import make_pairs

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_denoiser_cfg():
    return DenoiserConfig(embed_dim=16, depths=(1, 1), window_size=4, patch_size=2, head_dim=8,
                          num_groups=4, cond_dim=16, image_side=8)


@pytest.fixture
def ci_denoiser_cfg():
    return DenoiserConfig(embed_dim=16, depths=(2, 2, 2), num_groups=4, cond_dim=32, image_side=32)


@pytest.fixture(scope="session")
def toy_pairs():
    return make_pairs(6, 32, seed=3)


@pytest.fixture
def textured_image(rng):
    yy, xx = np.mgrid[0:48, 0:48] / 47.0
    base = np.stack([0.5 + 0.3 * np.sin(9 * xx), 0.5 + 0.3 * np.cos(7 * yy), 0.4 + 0.2 * xx * yy], -1)
    return np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1)
