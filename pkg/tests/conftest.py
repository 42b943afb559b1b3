import numpy as np
import pytest

from loopstack import MoEConfig, ModelConfig, random_model


def make_config(**overrides) -> ModelConfig:
    base = dict(n_layers=6, d_model=48, n_heads=4, head_dim=12,
                ffn_hidden=96, vocab_size=128)
    base.update(overrides)
    return ModelConfig(**base)


def make_moe_config(**overrides) -> ModelConfig:
    base = dict(moe=MoEConfig(n_experts=4, top_k=2, expert_hidden=64),
                moe_layer_indices=(1, 3, 5))
    base.update(overrides)
    return make_config(**base)


def make_prompt(model, n, seed=0) -> np.ndarray:
    gen = np.random.default_rng(seed)
    return gen.integers(0, model.config.vocab_size, size=n, dtype=np.int64)


@pytest.fixture(scope="session")
def dense_model():
    return random_model(make_config(), seed=3)


@pytest.fixture(scope="session")
def moe_model():
    return random_model(make_moe_config(), seed=5)
