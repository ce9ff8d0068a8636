import pytest

from tadakv.cache import PrecisionPlan
from tadakv.model import random_model

from util import make_cfg


@pytest.fixture(scope="session")
def toy_cfg():
    """Default toy scale: 4 layers, 8 query heads, 2 KV heads, head_dim 16."""
    return make_cfg(
        num_layers=4,
        num_q_heads=8,
        num_kv_heads=2,
        head_dim=16,
        residual_length=4,
        plan=PrecisionPlan.uniform(4, 4),
    )


@pytest.fixture(scope="session")
def toy_model(toy_cfg):
    return random_model(toy_cfg, vocab_size=256, seed=2024)
