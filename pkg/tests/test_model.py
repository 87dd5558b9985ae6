"""Model math tests with independent in-test oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_offload.model import (
    CategoricalSampler,
    ExpertWeights,
    GateOutcome,
    HiddenState,
    ModelConfig,
    NonFiniteError,
    build_model,
    gate,
    init_params,
    moe_forward,
    sample_greedy,
    swiglu,
    top_k_select,
    toy_config,
)
from moe_offload.store import ExpertKey


def oracle_swiglu(ew, x):
    """Standalone feed-forward oracle, written independently of the package."""
    a = x @ ew.w_gate_proj
    gated = a / (1.0 + np.exp(-a)) * (x @ ew.w_up_proj)
    return gated @ ew.w_down_proj


def zeroed_expert(layer, e, d, f, rng=None):
    z = lambda *s: np.zeros(s, dtype=np.float32)
    return ExpertWeights(ExpertKey(layer, e), z(d, f), z(d, f), z(f, d))


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=8, d_model=30, n_layers=1, n_heads=4,
                        d_ffn=8, n_experts=4)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=8, d_model=32, n_layers=1, n_heads=4,
                        d_ffn=8, n_experts=2, top_k_gate=3)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=0, d_model=32, n_layers=1, n_heads=4,
                        d_ffn=8, n_experts=2)

    def test_init_deterministic(self):
        cfg = toy_config(seed=9)
        p1, p2 = init_params(cfg), init_params(cfg)
        assert p1.keys() == p2.keys()
        for name in p1:
            assert np.array_equal(p1[name], p2[name]), name


class TestGate:
    def make_gate_probe(self, logit_rows, n_experts, top_k=2):
        """Model whose layer-0 gate logits equal logit_rows for h = e_0."""
        cfg = ModelConfig(vocab_size=8, d_model=4, n_layers=1, n_heads=1,
                          d_ffn=8, n_experts=n_experts, top_k_gate=top_k, seed=0)
        model = build_model(cfg)
        gm = np.zeros((4, n_experts), dtype=np.float32)
        gm[0, :] = logit_rows
        model.params["layers.0.gate"] = gm
        h = np.zeros(4, dtype=np.float32)
        h[0] = 1.0
        return model, h

    def test_tie_break_lowest_index(self):
        model, h = self.make_gate_probe(np.zeros(8), 8)
        out = gate(model, 0, h)
        assert out.experts == (ExpertKey(0, 0), ExpertKey(0, 1))
        assert out.weights.tolist() == [0.5, 0.5]

    def test_hand_computed_softmax(self):
        model, h = self.make_gate_probe([1.0, 3.0, 2.0, -1.0], 4)
        out = gate(model, 0, h)
        assert [k.expert for k in out.experts] == [1, 2]
        expected = np.array([np.e**3, np.e**2]) / (np.e**3 + np.e**2)
        np.testing.assert_allclose(out.weights, expected, atol=1e-6)
        assert out.weights[0] == pytest.approx(0.7311, abs=1e-4)
        assert out.weights[1] == pytest.approx(0.2689, abs=1e-4)

    def test_two_experts_always_both_selected(self):
        rng = np.random.default_rng(0)
        model, _ = self.make_gate_probe([0.0, 0.0], 2)
        for _ in range(20):
            h = rng.normal(size=4).astype(np.float32)
            out = gate(model, 0, h)
            assert {k.expert for k in out.experts} == {0, 1}

    def test_rejects_non_finite(self):
        model, h = self.make_gate_probe(np.zeros(4), 4)
        h = h.copy()
        h[1] = np.inf
        with pytest.raises(NonFiniteError):
            gate(model, 0, h)

    def test_accepts_hidden_state_wrapper(self):
        model, h = self.make_gate_probe([5.0, 1.0, 0.0, 0.0], 4)
        hs = HiddenState(token_pos=7, layer=0, stage="pre_moe", values=h)
        out = gate(model, 0, hs)
        assert out.token_pos == 7

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_gate_properties(self, seed):
        rng = np.random.default_rng(seed)
        cfg = toy_config()
        model = build_model(cfg)
        h = rng.normal(size=cfg.d_model).astype(np.float32)
        layer = int(rng.integers(cfg.n_layers))
        out = gate(model, layer, h)
        assert len(set(out.experts)) == cfg.top_k_gate
        assert np.all(out.weights >= 0)
        assert abs(float(out.weights.sum()) - 1.0) < 1e-6
        assert np.all(np.diff(out.weights) <= 0)
        top = set(np.argsort(-out.logits, kind="stable")[: cfg.top_k_gate])
        assert {k.expert for k in out.experts} == {int(i) for i in top}


class TestMoeForward:
    def test_zero_experts_identity(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=16).astype(np.float32)
        outcome = GateOutcome(
            layer=0, token_pos=0,
            experts=(ExpertKey(0, 0), ExpertKey(0, 1)),
            weights=np.array([0.6, 0.4], dtype=np.float32),
            logits=np.zeros(4, dtype=np.float32),
        )
        experts = [zeroed_expert(0, 0, 16, 8), zeroed_expert(0, 1, 16, 8)]
        assert np.array_equal(moe_forward(h, outcome, experts), h)

    def test_single_expert_matches_standalone_ffn(self):
        rng = np.random.default_rng(2)
        d, f = 16, 24
        ew = ExpertWeights(ExpertKey(0, 3),
                           rng.normal(size=(d, f)).astype(np.float32),
                           rng.normal(size=(d, f)).astype(np.float32),
                           rng.normal(size=(f, d)).astype(np.float32))
        h = rng.normal(size=d).astype(np.float32)
        outcome = GateOutcome(0, 0, (ExpertKey(0, 3),),
                              np.array([1.0], dtype=np.float32),
                              np.zeros(4, dtype=np.float32))
        got = moe_forward(h, outcome, [ew])
        np.testing.assert_allclose(got, h + oracle_swiglu(ew, h), atol=1e-5)

    def test_top2_matches_dense_mixture_oracle(self):
        rng = np.random.default_rng(3)
        d, f = 16, 24
        mk = lambda e: ExpertWeights(ExpertKey(0, e),
                                     rng.normal(size=(d, f)).astype(np.float32),
                                     rng.normal(size=(d, f)).astype(np.float32),
                                     rng.normal(size=(f, d)).astype(np.float32))
        e1, e2 = mk(1), mk(2)
        h = rng.normal(size=d).astype(np.float32)
        w = np.array([0.7310586, 0.2689414], dtype=np.float32)
        outcome = GateOutcome(0, 0, (ExpertKey(0, 1), ExpertKey(0, 2)), w,
                              np.zeros(4, dtype=np.float32))
        expected = h + w[0] * oracle_swiglu(e1, h) + w[1] * oracle_swiglu(e2, h)
        np.testing.assert_allclose(moe_forward(h, outcome, [e1, e2]), expected, atol=1e-5)

    def test_missing_expert_hard_error(self):
        h = np.zeros(8, dtype=np.float32)
        outcome = GateOutcome(0, 0, (ExpertKey(0, 0), ExpertKey(0, 1)),
                              np.array([0.5, 0.5], dtype=np.float32),
                              np.zeros(4, dtype=np.float32))
        with pytest.raises(ValueError):
            moe_forward(h, outcome, [zeroed_expert(0, 0, 8, 4)])
        with pytest.raises(ValueError):
            moe_forward(h, outcome, [zeroed_expert(0, 0, 8, 4), zeroed_expert(0, 7, 8, 4)])


class TestTopKSelect:
    def test_matches_stable_argsort(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            logits = rng.integers(-3, 3, size=8).astype(np.float32)
            idx = top_k_select(logits, 3)
            assert len(set(idx.tolist())) == 3
            vals = logits[idx]
            assert np.all(np.diff(vals) <= 0)
            # Ties resolve to the lowest expert index.
            for rank in range(1, 3):
                if vals[rank] == vals[rank - 1]:
                    assert idx[rank] > idx[rank - 1]


class TestSamplers:
    def test_greedy_lowest_index_on_tie(self):
        assert sample_greedy(np.array([1.0, 3.0, 3.0])) == 1

    def test_categorical_deterministic(self):
        logits = np.array([0.1, 2.0, -1.0, 0.5], dtype=np.float32)
        a = [CategoricalSampler(5)(logits) for _ in range(10)]
        b = [CategoricalSampler(5)(logits) for _ in range(10)]
        assert a == b
