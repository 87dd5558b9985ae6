import numpy as np
import pytest

from moe_offload.model import ModelConfig, build_model, toy_config


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return toy_config(vocab_size=32, d_model=32, n_layers=4, n_heads=4,
                      d_ffn=48, n_experts=8, max_seq_len=128)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture(scope="session")
def trained_model():
    """A briefly trained toy model; training is deterministic, so every test
    session sees identical parameters."""
    from moe_offload.training import MarkovCorpusSpec, train_toy

    config = toy_config(seed=3)
    corpus = MarkovCorpusSpec(vocab_size=config.vocab_size, seed=11)
    result = train_toy(config, corpus, steps=300, batch_size=8, seq_len=32)
    return result.model


def make_prompt(rng_seed: int, length: int, vocab: int) -> list[int]:
    rng = np.random.default_rng(rng_seed)
    return [int(t) for t in rng.integers(0, vocab, size=length)]
