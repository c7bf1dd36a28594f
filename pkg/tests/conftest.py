# tests/conftest.py
import os
import sys

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from config.settings import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Two-layer encoder small enough for exact checks."""
    return ModelConfig(
        layers=2,
        d_model=16,
        heads=2,
        vocab_size=50,
        max_seq=16,
        variant="shared_qkv",
        dropout_hidden=0.0,
        dropout_attn=0.0,
    )


@pytest.fixture
def bert_base_config():
    return ModelConfig(
        layers=12,
        d_model=768,
        heads=12,
        vocab_size=30522,
        max_seq=512,
        variant="standard",
    )
