"""Trainer tests: gradient check against finite differences, determinism,
loss decrease, gate specialization."""

import numpy as np
import pytest

from moe_offload.model import ModelConfig, NonFiniteError, init_params
from moe_offload.training import (
    MarkovCorpus,
    MarkovCorpusSpec,
    gate_statistics,
    loss_and_grads,
    train_toy,
)


def micro_config():
    return ModelConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2,
                       d_ffn=12, n_experts=3, top_k_gate=2, seed=5,
                       max_seq_len=16)


class TestGradients:
    def test_matches_finite_differences(self):
        cfg = micro_config()
        params = {k: v.astype(np.float64) for k, v in init_params(cfg).items()}
        rng = np.random.default_rng(0)
        tokens = rng.integers(cfg.vocab_size, size=(2, 6))
        targets = rng.integers(cfg.vocab_size, size=(2, 6))
        aux = 0.05

        def total_loss():
            ce, a, _ = loss_and_grads(params, cfg, tokens, targets, aux)
            return ce + aux * a

        _, _, grads = loss_and_grads(params, cfg, tokens, targets, aux)
        h = 1e-6
        checked = 0
        for name in sorted(params):
            flat = params[name].reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up = total_loss()
                flat[i] = orig - h
                down = total_loss()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                assert numeric == pytest.approx(gflat[i], abs=2e-6, rel=2e-4), name
                checked += 1
        assert checked > 60

    def test_aux_loss_grad_included(self):
        # The aux term must move gate gradients: compare grads at coeff 0 vs 1.
        cfg = micro_config()
        params = {k: v.astype(np.float64) for k, v in init_params(cfg).items()}
        rng = np.random.default_rng(1)
        tokens = rng.integers(cfg.vocab_size, size=(2, 5))
        targets = rng.integers(cfg.vocab_size, size=(2, 5))
        _, _, g0 = loss_and_grads(params, cfg, tokens, targets, 0.0)
        _, _, g1 = loss_and_grads(params, cfg, tokens, targets, 1.0)
        assert not np.allclose(g0["layers.0.gate"], g1["layers.0.gate"])


class TestCorpus:
    def test_deterministic(self):
        spec = MarkovCorpusSpec(vocab_size=16, seed=4)
        a = MarkovCorpus(spec).sample(np.random.default_rng(0), 4, 20)
        b = MarkovCorpus(spec).sample(np.random.default_rng(0), 4, 20)
        assert np.array_equal(a, b)
        assert a.shape == (4, 20)
        assert a.min() >= 0 and a.max() < 16

    def test_context_is_informative(self):
        # Peaky transitions: the chain's conditional entropy sits well below
        # uniform, so there is structure for the gates to pick up.
        spec = MarkovCorpusSpec(vocab_size=32, seed=0)
        t = MarkovCorpus(spec).transitions
        ent = -(t * np.log(np.maximum(t, 1e-12))).sum(-1).mean()
        assert ent < 0.5 * np.log(32)


class TestTrainToy:
    def test_steps_zero_is_identity(self):
        cfg = micro_config()
        result = train_toy(cfg, MarkovCorpusSpec(vocab_size=11, seed=0),
                           steps=0, seq_len=8)
        ref = init_params(cfg)
        assert result.model.params.keys() == ref.keys()
        for name in ref:
            assert np.array_equal(result.model.params[name], ref[name])

    def test_same_seed_bit_identical(self):
        cfg = micro_config()
        corpus = MarkovCorpusSpec(vocab_size=11, seed=2)
        a = train_toy(cfg, corpus, steps=12, batch_size=4, seq_len=8)
        b = train_toy(cfg, corpus, steps=12, batch_size=4, seq_len=8)
        for name in a.model.params:
            assert np.array_equal(a.model.params[name], b.model.params[name]), name

    def test_loss_decreases(self, trained_model):
        # The session fixture trains 300 steps; compare endpoints.
        from tests.conftest import make_prompt  # noqa: F401  (fixture reuse)
        # Recompute losses on held-out batches for an honest comparison.
        corpus = MarkovCorpus(MarkovCorpusSpec(vocab_size=trained_model.config.vocab_size, seed=11))
        rng = np.random.default_rng(99)
        batch = corpus.sample(rng, 16, 33)
        tokens, targets = batch[:, :-1], batch[:, 1:]
        ce_trained, _, _ = loss_and_grads(trained_model.params, trained_model.config,
                                          tokens, targets, 0.0)
        ce_init, _, _ = loss_and_grads(init_params(trained_model.config),
                                       trained_model.config, tokens, targets, 0.0)
        assert ce_trained < ce_init - 0.5

    def test_gate_entropy_below_uniform(self, trained_model):
        corpus = MarkovCorpus(MarkovCorpusSpec(vocab_size=trained_model.config.vocab_size, seed=11))
        batch = corpus.sample(np.random.default_rng(5), 8, 32)
        ent = gate_statistics(trained_model.params, trained_model.config, batch)
        assert np.all(ent < np.log(trained_model.config.n_experts))

    def test_divergence_aborts(self):
        cfg = micro_config()
        with pytest.raises(NonFiniteError):
            train_toy(cfg, MarkovCorpusSpec(vocab_size=11, seed=0),
                      steps=60, batch_size=4, seq_len=8, lr=1e4)

    def test_vocab_mismatch_rejected(self):
        with pytest.raises(ValueError):
            train_toy(micro_config(), MarkovCorpusSpec(vocab_size=7), steps=1)
