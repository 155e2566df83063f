import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dfqvit.model import ViTConfig, ViTModel  # noqa: E402


@pytest.fixture
def tiny_config():
    return ViTConfig(image_size=8, patch_size=4, hidden_dim=16, num_layers=2, num_heads=2,
                     mlp_ratio=2, num_classes=10)


@pytest.fixture
def tiny_model(tiny_config):
    return ViTModel.init(tiny_config, seed=3)
