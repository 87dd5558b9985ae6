"""Brief deterministic training on a synthetic corpus.

The corpus is an order-2 Markov chain over the vocabulary, so token context
predicts routing and the trained gates exhibit the short expert-reuse runs
the offloading policies exploit. Training uses a vectorized teacher-forced
forward/backward pass with Adam plus a small load-balancing term that keeps
all experts in play; everything is seeded, so identical inputs give
bit-identical parameters.

The trainer exists to produce models whose gating has nontrivial structure;
the inference path in :mod:`moe_offload.model` never depends on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model, ModelConfig, NonFiniteError, _LN_EPS, _sigmoid, init_params


@dataclass(frozen=True)
class MarkovCorpusSpec:
    """Seeded order-2 Markov chain over ``vocab_size`` symbols."""

    vocab_size: int
    seed: int = 0
    concentration: float = 0.08  # Dirichlet alpha; smaller = peakier contexts

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "seed": self.seed,
                "concentration": self.concentration}


class MarkovCorpus:
    def __init__(self, spec: MarkovCorpusSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        v = spec.vocab_size
        alpha = np.full(v, spec.concentration)
        self.transitions = rng.dirichlet(alpha, size=(v, v)).astype(np.float64)

    def sample(self, rng: np.random.Generator, batch: int, length: int) -> np.ndarray:
        """(batch, length) token matrix drawn from the chain."""
        v = self.spec.vocab_size
        out = np.empty((batch, length), dtype=np.int64)
        out[:, 0] = rng.integers(v, size=batch)
        out[:, 1] = rng.integers(v, size=batch)
        for t in range(2, length):
            probs = self.transitions[out[:, t - 2], out[:, t - 1]]
            u = rng.random(batch)
            out[:, t] = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
        return out


# --------------------------------------------------------------------------
# Vectorized forward/backward (training only; inference is per-token)
# --------------------------------------------------------------------------

def _layer_norm_fwd(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layer_norm_bwd(dy, cache):
    xhat, inv, gamma = cache
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _forward(params, cfg: ModelConfig, tokens):
    """Teacher-forced pass over a (B, T) batch; returns logits and caches."""
    b, t = tokens.shape
    h, hd = cfg.n_heads, cfg.head_dim
    x = params["wte"][tokens] + params["wpe"][:t][None, :, :]
    caches = []
    mask = np.triu(np.full((t, t), -1e9, dtype=x.dtype), k=1)
    for ell in range(cfg.n_layers):
        base = f"layers.{ell}"
        c = {"x_in": x}
        normed, c["ln1"] = _layer_norm_fwd(x, params[f"{base}.ln1.gamma"],
                                           params[f"{base}.ln1.beta"])
        c["normed"] = normed
        q = (normed @ params[f"{base}.attn.wq"]).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        k = (normed @ params[f"{base}.attn.wk"]).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        v = (normed @ params[f"{base}.attn.wv"]).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd) + mask
        alpha = _softmax(scores)
        ctx = (alpha @ v).transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        c.update(q=q, k=k, v=v, alpha=alpha, ctx=ctx)
        resid = x + ctx @ params[f"{base}.attn.wo"]
        x, c["ln2"] = _layer_norm_fwd(resid, params[f"{base}.ln2.gamma"],
                                      params[f"{base}.ln2.beta"])

        c["x_mid"] = x
        gate_logits = x @ params[f"{base}.gate"]
        idx = np.argsort(-gate_logits, axis=-1, kind="stable")[..., : cfg.top_k_gate]
        zsel = np.take_along_axis(gate_logits, idx, axis=-1)
        wsel = _softmax(zsel)
        c.update(gate_logits=gate_logits, idx=idx, wsel=wsel)

        y = np.zeros_like(x)
        expert_cache = []
        for e in range(cfg.n_experts):
            slot_mask = idx == e
            used = slot_mask.any(-1)
            if not used.any():
                expert_cache.append(None)
                continue
            rows = x[used]
            a = rows @ params[f"{base}.experts.{e}.w_gate_proj"]
            bu = rows @ params[f"{base}.experts.{e}.w_up_proj"]
            sig = _sigmoid(a)
            hidden = a * sig * bu
            out = hidden @ params[f"{base}.experts.{e}.w_down_proj"]
            slot_w = (wsel * slot_mask)[used].sum(-1)
            y[used] += slot_w[:, None] * out
            expert_cache.append({"used": used, "rows": rows, "a": a, "bu": bu,
                                 "sig": sig, "hidden": hidden, "out": out,
                                 "slot": slot_mask[used].argmax(-1)})
        c["experts"] = expert_cache
        x = x + y
        caches.append(c)

    normed, ln_f_cache = _layer_norm_fwd(x, params["ln_f.gamma"], params["ln_f.beta"])
    logits = normed @ params["lm_head"]
    return logits, normed, ln_f_cache, caches


def loss_and_grads(params, cfg: ModelConfig, tokens, targets, aux_coeff: float):
    """Cross-entropy + load-balance loss, with gradients for every tensor."""
    b, t = tokens.shape
    n_tok = b * t
    logits, nf, ln_f_cache, caches = _forward(params, cfg, tokens)

    probs = _softmax(logits)
    tgt = probs.reshape(n_tok, -1)[np.arange(n_tok), targets.reshape(-1)]
    ce = float(-np.log(np.maximum(tgt, 1e-12)).mean())

    aux_terms = []
    for c in caches:
        p_full = _softmax(c["gate_logits"])
        f_e = np.zeros(cfg.n_experts, dtype=p_full.dtype)
        np.add.at(f_e, c["idx"].reshape(-1), 1.0)
        f_e /= n_tok * cfg.top_k_gate
        aux_terms.append((cfg.n_experts * float(f_e @ p_full.mean((0, 1))), p_full, f_e))
    aux = sum(term for term, _, _ in aux_terms) / cfg.n_layers

    grads = {name: np.zeros_like(p) for name, p in params.items()}

    dlogits = probs.copy()
    flat = dlogits.reshape(n_tok, -1)
    flat[np.arange(n_tok), targets.reshape(-1)] -= 1.0
    dlogits /= n_tok

    grads["lm_head"] += nf.reshape(n_tok, -1).T @ dlogits.reshape(n_tok, -1)
    dnf = dlogits @ params["lm_head"].T
    dx, dgamma, dbeta = _layer_norm_bwd(dnf, ln_f_cache)
    grads["ln_f.gamma"] += dgamma
    grads["ln_f.beta"] += dbeta

    h, hd = cfg.n_heads, cfg.head_dim
    for ell in reversed(range(cfg.n_layers)):
        base = f"layers.{ell}"
        c = caches[ell]

        # MoE block: x_out = x_mid + sum slot_w * expert(x_mid)
        dx_mid = dx.copy()
        dwsel = np.zeros_like(c["wsel"])
        for e in range(cfg.n_experts):
            ec = c["experts"][e]
            if ec is None:
                continue
            used = ec["used"]
            slot_w = (c["wsel"] * (c["idx"] == e))[used].sum(-1)
            dy_rows = dx[used]
            dout = dy_rows * slot_w[:, None]
            grads[f"{base}.experts.{e}.w_down_proj"] += ec["hidden"].T @ dout
            dhidden = dout @ params[f"{base}.experts.{e}.w_down_proj"].T
            da = dhidden * ec["bu"] * ec["sig"] * (1.0 + ec["a"] * (1.0 - ec["sig"]))
            dbu = dhidden * ec["a"] * ec["sig"]
            grads[f"{base}.experts.{e}.w_gate_proj"] += ec["rows"].T @ da
            grads[f"{base}.experts.{e}.w_up_proj"] += ec["rows"].T @ dbu
            dx_mid[used] += da @ params[f"{base}.experts.{e}.w_gate_proj"].T
            dx_mid[used] += dbu @ params[f"{base}.experts.{e}.w_up_proj"].T
            d_slot = (dy_rows * ec["out"]).sum(-1)
            bi, ti = np.nonzero(used)
            dwsel[bi, ti, ec["slot"]] += d_slot

        dzsel = c["wsel"] * (dwsel - (dwsel * c["wsel"]).sum(-1, keepdims=True))
        dgate = np.zeros_like(c["gate_logits"])
        np.put_along_axis(dgate, c["idx"], dzsel, axis=-1)

        _, p_full, f_e = aux_terms[ell]
        dp = np.broadcast_to(
            (aux_coeff / cfg.n_layers) * cfg.n_experts * f_e / n_tok, p_full.shape)
        dgate += p_full * (dp - (dp * p_full).sum(-1, keepdims=True))

        grads[f"{base}.gate"] += c["x_mid"].reshape(n_tok, -1).T @ dgate.reshape(n_tok, -1)
        dx_mid += dgate @ params[f"{base}.gate"].T

        # Stream norm: x_mid = ln2(x_in + attn(ln1(x_in)))
        dresid, dgamma2, dbeta2 = _layer_norm_bwd(dx_mid, c["ln2"])
        grads[f"{base}.ln2.gamma"] += dgamma2
        grads[f"{base}.ln2.beta"] += dbeta2

        dattn = dresid
        bsz, t = dattn.shape[:2]
        grads[f"{base}.attn.wo"] += c["ctx"].reshape(-1, cfg.d_model).T @ dattn.reshape(-1, cfg.d_model)
        dctx = (dattn @ params[f"{base}.attn.wo"].T).reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        dalpha = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["alpha"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["alpha"] * (dalpha - (dalpha * c["alpha"]).sum(-1, keepdims=True))
        dq = dscores @ c["k"] / np.sqrt(hd)
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"] / np.sqrt(hd)

        def merge(m):
            return m.transpose(0, 2, 1, 3).reshape(bsz * t, cfg.d_model)

        normed_flat = c["normed"].reshape(bsz * t, cfg.d_model)
        dnormed = np.zeros_like(normed_flat)
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            flat_d = merge(dmat)
            grads[f"{base}.attn.{name}"] += normed_flat.T @ flat_d
            dnormed += flat_d @ params[f"{base}.attn.{name}"].T
        dln, dgamma, dbeta = _layer_norm_bwd(dnormed.reshape(bsz, t, cfg.d_model), c["ln1"])
        grads[f"{base}.ln1.gamma"] += dgamma
        grads[f"{base}.ln1.beta"] += dbeta
        dx = dresid + dln

    np.add.at(grads["wte"], tokens, dx)
    grads["wpe"][:t] += dx.sum(0)
    return ce, float(aux), grads


def gate_statistics(params, cfg: ModelConfig, tokens) -> np.ndarray:
    """Mean entropy (nats) of the full gate softmax, per layer."""
    _, _, _, caches = _forward(params, cfg, tokens)
    out = []
    for c in caches:
        p = _softmax(c["gate_logits"])
        ent = -(p * np.log(np.maximum(p, 1e-12))).sum(-1)
        out.append(float(ent.mean()))
    return np.array(out)


# --------------------------------------------------------------------------
# Adam + training loop
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)
    init_loss: float = float("nan")
    final_loss: float = float("nan")


def train_toy(config: ModelConfig, corpus: MarkovCorpusSpec, steps: int,
              batch_size: int = 8, seq_len: int = 32, lr: float = 2e-3,
              aux_coeff: float = 0.02, betas=(0.9, 0.999), eps: float = 1e-8) -> TrainResult:
    """Train briefly; loss must end below its initial value or training aborts
    on divergence. ``steps=0`` returns the seeded initialization untouched."""
    if corpus.vocab_size != config.vocab_size:
        raise ValueError("corpus vocabulary must match the model")
    if seq_len + 1 > config.max_seq_len:
        raise ValueError("seq_len exceeds the model's max_seq_len")
    params = init_params(config)
    result = TrainResult(model=Model(config=config, params=params))
    if steps == 0:
        return result

    chain = MarkovCorpus(corpus)
    rng = np.random.default_rng((config.seed << 16) ^ corpus.seed ^ 0x5EED)
    m = {n: np.zeros_like(p) for n, p in params.items()}
    v = {n: np.zeros_like(p) for n, p in params.items()}
    b1, b2 = betas

    for step in range(1, steps + 1):
        batch = chain.sample(rng, batch_size, seq_len + 1)
        tokens, targets = batch[:, :-1], batch[:, 1:]
        ce, aux, grads = loss_and_grads(params, config, tokens, targets, aux_coeff)
        if not np.isfinite(ce) or not np.isfinite(aux):
            raise NonFiniteError(f"training diverged at step {step}: ce={ce} aux={aux}")
        result.losses.append(ce)
        if step == 1:
            result.init_loss = ce
        for name, g in grads.items():
            m[name] = b1 * m[name] + (1 - b1) * g
            v[name] = b2 * v[name] + (1 - b2) * g * g
            mhat = m[name] / (1 - b1 ** step)
            vhat = v[name] / (1 - b2 ** step)
            params[name] = (params[name] - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)

    result.final_loss = result.losses[-1]
    return result
