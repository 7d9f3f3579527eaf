"""Shared fixtures: single-thread torch, small generated scenes, tiny models."""

import numpy as np
import pytest
import torch

from hand4d.config import desk_config
from hand4d.datagen import GenSpec, gen_scene

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_config()


@pytest.fixture(scope="session")
def scene_static():
    """One clean static-camera scene, 48 frames."""
    return gen_scene(GenSpec(seed=11, camera_mode="static", occlusion_regime="clean"))


@pytest.fixture(scope="session")
def scene_dynamic():
    """One bursty dynamic-camera scene, 48 frames."""
    return gen_scene(GenSpec(seed=12, camera_mode="dynamic", occlusion_regime="bursty"))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
