import numpy as np
import pytest

from davt.backbone import ViTConfig, init_params


@pytest.fixture
def tiny_config():
    # Smallest legal model that still has distinct fusion/selection layers.
    return ViTConfig(image_size=32, patch_size=8, hidden_dim=16, layers=4,
                     heads=2, mlp_dim=32, num_classes=3, seed=1)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
