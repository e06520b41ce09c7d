import numpy as np
import pytest
import torch

from sortrank.data import SynthConfig
from sortrank.experiment import prepare_data
from sortrank.model import ModelConfig
from sortrank.moe import SparsityConfig

torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    """d=8, h=2, depth=2, E=2: small enough for finite differences."""
    base = dict(
        depth=2, d_model=8, n_heads=2, intermediate=8, preset="small",
        window=3, full_suffix=1, prune_final=2,
        sparsity=SparsityConfig(total_experts=2, activated=1, shared=1),
    )
    base.update(overrides)
    return ModelConfig(**base)


TINY_SYNTH = dict(n_users=200, n_items=60, n_requests=600, n_days=4, history_max=12, candidates_per_request=6)


@pytest.fixture(scope="session")
def tiny_data():
    return prepare_data(SynthConfig(**TINY_SYNTH))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def default_data():
    """The default synthetic log, generated once per session (used by the learnability checks)."""
    return prepare_data(SynthConfig())
