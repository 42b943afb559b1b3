import numpy as np
import pytest

from loopstack import (KVCache, ModelConfig, MoEConfig, RoutingRecord,
                       block_forward, embed_tokens, lm_head, model_forward,
                       moe_mlp, random_model)
from loopstack.model import ExpertWeights, MoEWeights

from conftest import make_config, make_moe_config, make_prompt


# ---------------------------------------------------------------------------
# straight-line float64 reimplementation (oracle)
# ---------------------------------------------------------------------------


def _o_rms(x, gain, eps):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return gain * x / np.sqrt(ms + eps)


def _o_softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _o_silu(x):
    return x / (1.0 + np.exp(-x))


def _o_rope(x, position, base, head_dim):
    out = x.copy()
    for j in range(head_dim // 2):
        theta = position * base ** (-2.0 * j / head_dim)
        c, s = np.cos(theta), np.sin(theta)
        even, odd = x[..., 2 * j].copy(), x[..., 2 * j + 1].copy()
        out[..., 2 * j] = even * c - odd * s
        out[..., 2 * j + 1] = even * s + odd * c
    return out


def _o_topk(logits, top_k):
    order = sorted(range(len(logits)), key=lambda e: (-logits[e], e))
    return sorted(order[:top_k])


def _o_block(x, layer, cfg):
    t, d = x.shape
    h, hd = cfg.n_heads, cfg.head_dim
    xn = _o_rms(x, layer.norm1_gain.astype(np.float64), cfg.norm_eps)
    q = (xn @ layer.wq.astype(np.float64)).reshape(t, h, hd)
    k = (xn @ layer.wk.astype(np.float64)).reshape(t, h, hd)
    v = (xn @ layer.wv.astype(np.float64)).reshape(t, h, hd)
    for pos in range(t):
        q[pos] = _o_rope(q[pos], pos, cfg.rope_base, hd)
        k[pos] = _o_rope(k[pos], pos, cfg.rope_base, hd)
    ctx = np.zeros((t, h, hd))
    for hh in range(h):
        for i in range(t):
            scores = np.array([q[i, hh] @ k[jj, hh] / np.sqrt(hd)
                               for jj in range(i + 1)])
            w = _o_softmax(scores)
            ctx[i, hh] = sum(w[jj] * v[jj, hh] for jj in range(i + 1))
    hmid = x + ctx.reshape(t, d) @ layer.wo.astype(np.float64)
    hn = _o_rms(hmid, layer.norm2_gain.astype(np.float64), cfg.norm_eps)
    if layer.is_moe:
        out = np.zeros_like(hn)
        gate = layer.moe.gate.astype(np.float64)
        for i in range(t):
            logits = hn[i] @ gate
            chosen = _o_topk(list(logits), cfg.moe.top_k)
            w = _o_softmax(logits[chosen])
            for wi, e in zip(w, chosen):
                ew = layer.moe.experts[e]
                hid = _o_silu(hn[i] @ ew.w_gate.astype(np.float64)) * \
                    (hn[i] @ ew.w_up.astype(np.float64))
                out[i] += wi * (hid @ ew.w_down.astype(np.float64))
    else:
        out = _o_silu(hn @ layer.w_gate.astype(np.float64)) * \
            (hn @ layer.w_up.astype(np.float64)) @ layer.w_down.astype(np.float64)
    return hmid + out


def oracle_forward(tokens, model):
    cfg = model.config
    x = model.embed.astype(np.float64)[np.asarray(tokens)]
    for layer in model.layers:
        x = _o_block(x, layer, cfg)
    xn = _o_rms(x, model.final_norm_gain.astype(np.float64), cfg.norm_eps)
    return xn @ model.head.astype(np.float64)


@pytest.mark.parametrize("kind", ["dense", "moe"])
def test_forward_matches_straight_line_reimplementation(kind):
    cfg = make_config(n_layers=3) if kind == "dense" else \
        make_moe_config(n_layers=3, moe_layer_indices=(1, 2))
    model = random_model(cfg, seed=11)
    tokens = make_prompt(model, 7, seed=1)
    got = model_forward(tokens, model).astype(np.float64)
    want = oracle_forward(tokens, model)
    assert np.max(np.abs(got - want)) < 1e-3
    # the scale of agreement should be float32-rounding, not approximation
    assert np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want))) < 1e-4


# ---------------------------------------------------------------------------
# structural properties of one block
# ---------------------------------------------------------------------------


def test_block_with_zeroed_projections_is_identity():
    cfg = make_config(n_layers=1)
    model = random_model(cfg, seed=2)
    layer = model.layers[0]
    layer.wo = np.zeros_like(layer.wo)
    layer.w_down = np.zeros_like(layer.w_down)
    x = embed_tokens(make_prompt(model, 5, seed=2), model)
    out, routing = block_forward(x, layer, cfg)
    assert routing is None
    assert np.array_equal(out, x)


def test_attention_is_causal(dense_model):
    tokens = make_prompt(dense_model, 9, seed=3)
    base = model_forward(tokens, dense_model)
    changed = tokens.copy()
    changed[-1] = (changed[-1] + 1) % dense_model.config.vocab_size
    perturbed = model_forward(changed, dense_model)
    assert np.array_equal(base[:-1], perturbed[:-1])
    assert not np.array_equal(base[-1], perturbed[-1])


def test_block_output_dtype_and_shape(dense_model):
    x = embed_tokens(make_prompt(dense_model, 4, seed=4), dense_model)
    out, _ = block_forward(x, dense_model.layers[0], dense_model.config)
    assert out.shape == x.shape
    assert out.dtype == np.float32


# ---------------------------------------------------------------------------
# cache consistency
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["dense", "moe"])
def test_cached_prefill_matches_uncached(kind, dense_model, moe_model):
    model = dense_model if kind == "dense" else moe_model
    cfg = model.config
    tokens = make_prompt(model, 8, seed=5)
    plain = model_forward(tokens, model)
    cache = KVCache(cfg.n_layers, cfg.n_heads, cfg.head_dim)
    cached = model_forward(tokens, model, cache=cache, use_cache=True)
    assert np.array_equal(plain, cached)
    assert cache.lengths() == [len(tokens)] * cfg.n_layers


@pytest.mark.parametrize("kind", ["dense", "moe"])
def test_incremental_decode_matches_full_forward(kind, dense_model, moe_model):
    model = dense_model if kind == "dense" else moe_model
    cfg = model.config
    tokens = make_prompt(model, 6, seed=6)
    full = model_forward(tokens, model).astype(np.float64)
    cache = KVCache(cfg.n_layers, cfg.n_heads, cfg.head_dim)
    last = None
    for t in range(len(tokens)):
        last = model_forward(tokens[t:t + 1], model, cache=cache, use_cache=True)
    assert np.allclose(last[0].astype(np.float64), full[-1], atol=1e-4)


def test_kv_cache_append_view_crop_round_trip():
    cache = KVCache(n_layers=2, n_heads=2, head_dim=4)
    gen = np.random.default_rng(0)
    k1 = gen.standard_normal((3, 2, 4)).astype(np.float32)
    v1 = gen.standard_normal((3, 2, 4)).astype(np.float32)
    cache.append(0, k1, v1)
    k_view, v_view = cache.view(0)
    assert np.array_equal(k_view, k1) and np.array_equal(v_view, v1)
    assert cache.lengths() == [3, 0]

    cache.crop(0, 1)
    k_view, _ = cache.view(0)
    assert np.array_equal(k_view, k1[:1])
    with pytest.raises(ValueError):
        cache.crop(0, 2)  # survivors only: cannot grow back by cropping
    with pytest.raises(ValueError):
        cache.crop(1, -1)


def test_kv_cache_growth_preserves_contents():
    cache = KVCache(n_layers=1, n_heads=1, head_dim=2)
    rows = []
    gen = np.random.default_rng(1)
    for _ in range(50):
        k = gen.standard_normal((1, 1, 2)).astype(np.float32)
        rows.append(k)
        cache.append(0, k, k)
    k_view, _ = cache.view(0)
    assert np.array_equal(k_view, np.concatenate(rows, axis=0))


def test_kv_cache_event_log():
    log = []
    cache = KVCache(n_layers=1, n_heads=1, head_dim=2, log=log)
    z = np.zeros((2, 1, 2), dtype=np.float32)
    cache.append(0, z, z)
    cache.crop(0, 1)
    cache.mark("checkpoint")
    assert log == [("append", 0, 2, 2), ("crop", 0, 2, 1),
                   ("mark", "checkpoint")]


# ---------------------------------------------------------------------------
# mixture-of-experts routing
# ---------------------------------------------------------------------------


def _random_moe_weights(gen, d=8, n_experts=4, hidden=6):
    experts = [ExpertWeights(
        w_gate=gen.standard_normal((d, hidden)).astype(np.float32),
        w_up=gen.standard_normal((d, hidden)).astype(np.float32),
        w_down=gen.standard_normal((hidden, d)).astype(np.float32))
        for _ in range(n_experts)]
    gate = gen.standard_normal((d, n_experts)).astype(np.float32)
    return MoEWeights(gate=gate, experts=experts)


def test_moe_top_k_matches_brute_force():
    gen = np.random.default_rng(21)
    moe_w = _random_moe_weights(gen)
    x = gen.standard_normal((10, 8)).astype(np.float32)
    out, routing = moe_mlp(x, moe_w, top_k=2)
    for i in range(10):
        logits = x[i].astype(np.float64) @ moe_w.gate.astype(np.float64)
        chosen = _o_topk(list(logits), 2)
        assert list(routing.indices[i]) == chosen
        w = _o_softmax(logits[chosen])
        assert np.allclose(routing.weights[i], w, atol=1e-6)
        want = np.zeros(8)
        for wi, e in zip(w, chosen):
            ew = moe_w.experts[e]
            hid = _o_silu(x[i].astype(np.float64) @ ew.w_gate.astype(np.float64)) \
                * (x[i].astype(np.float64) @ ew.w_up.astype(np.float64))
            want += wi * (hid @ ew.w_down.astype(np.float64))
        assert np.allclose(out[i].astype(np.float64), want, atol=1e-5)
    # indices ascending, weights rows sum to 1
    assert (np.diff(routing.indices, axis=1) > 0).all()
    assert np.allclose(routing.weights.sum(axis=1), 1.0, atol=1e-6)


def test_moe_ties_break_toward_lower_index():
    gen = np.random.default_rng(22)
    moe_w = _random_moe_weights(gen, n_experts=3)
    # all three experts tie exactly: stability must pick experts (0, 1)
    moe_w.gate[:, 1] = moe_w.gate[:, 0]
    moe_w.gate[:, 2] = moe_w.gate[:, 0]
    x = gen.standard_normal((6, 8)).astype(np.float32)
    _, routing = moe_mlp(x, moe_w, top_k=2)
    assert (routing.indices[:, 0] == 0).all()
    assert (routing.indices[:, 1] == 1).all()
    assert np.allclose(routing.weights, 0.5)


def test_moe_pinned_routing_skips_the_gate():
    gen = np.random.default_rng(23)
    moe_w = _random_moe_weights(gen)
    x1 = gen.standard_normal((4, 8)).astype(np.float32)
    x2 = gen.standard_normal((4, 8)).astype(np.float32)
    _, r1 = moe_mlp(x1, moe_w, top_k=2)
    out_pinned, r_back = moe_mlp(x2, moe_w, top_k=2, pinned=r1)
    assert r_back.indices is r1.indices and r_back.weights is r1.weights
    # oracle: mix x2's expert outputs under x1's routing decision
    for i in range(4):
        want = np.zeros(8)
        for slot in range(2):
            e = int(r1.indices[i, slot])
            ew = moe_w.experts[e]
            hid = _o_silu(x2[i].astype(np.float64) @ ew.w_gate.astype(np.float64)) \
                * (x2[i].astype(np.float64) @ ew.w_up.astype(np.float64))
            want += float(r1.weights[i, slot]) * (hid @ ew.w_down.astype(np.float64))
        assert np.allclose(out_pinned[i].astype(np.float64), want, atol=1e-5)


def test_routing_record_same_experts():
    idx = np.array([[0, 2], [1, 3]], dtype=np.int64)
    w1 = np.full((2, 2), 0.5, dtype=np.float32)
    w2 = np.array([[0.9, 0.1], [0.2, 0.8]], dtype=np.float32)
    a, b = RoutingRecord(idx, w1), RoutingRecord(idx.copy(), w2)
    assert a.same_experts(b)
    c = RoutingRecord(idx[:, ::-1].copy(), w1)
    assert not a.same_experts(c)
    d = RoutingRecord(idx[:1], w1[:1])
    assert not a.same_experts(d)


# ---------------------------------------------------------------------------
# synthesis / embedding / head
# ---------------------------------------------------------------------------


def test_random_model_is_seed_deterministic():
    cfg = make_moe_config(n_layers=2, moe_layer_indices=(1,))
    m1, m2, m3 = (random_model(cfg, seed=s) for s in (9, 9, 10))
    assert np.array_equal(m1.embed, m2.embed)
    assert np.array_equal(m1.layers[0].wq, m2.layers[0].wq)
    assert np.array_equal(m1.layers[1].moe.experts[2].w_down,
                          m2.layers[1].moe.experts[2].w_down)
    assert not np.array_equal(m1.embed, m3.embed)
    assert len(m1.layers[1].moe.experts) == cfg.moe.n_experts


def test_embed_rejects_bad_tokens(dense_model):
    with pytest.raises(ValueError):
        embed_tokens(np.array([0, dense_model.config.vocab_size]), dense_model)
    with pytest.raises(ValueError):
        embed_tokens(np.array([[0, 1]]), dense_model)


def test_model_forward_shapes(dense_model, moe_model):
    for model in (dense_model, moe_model):
        tokens = make_prompt(model, 5, seed=7)
        logits = model_forward(tokens, model)
        assert logits.shape == (5, model.config.vocab_size)
        state = embed_tokens(tokens, model)
        assert lm_head(state, model).shape == (5, model.config.vocab_size)


def test_model_config_validation():
    with pytest.raises(ValueError):
        make_config(n_heads=5)  # 5 * 12 != 48
    with pytest.raises(ValueError):
        make_config(head_dim=13, n_heads=4, d_model=52)  # odd head_dim
    with pytest.raises(ValueError):
        make_moe_config(moe_layer_indices=(1, 1))  # duplicate index
    with pytest.raises(ValueError):
        make_moe_config(moe_layer_indices=(9,))  # out of range
    with pytest.raises(ValueError):
        ModelConfig(n_layers=2, d_model=16, n_heads=2, head_dim=8,
                    ffn_hidden=32, vocab_size=64,
                    moe=MoEConfig(n_experts=2, top_k=3, expert_hidden=8),
                    moe_layer_indices=(0,))  # top_k > n_experts
