"""Frozen pre-norm decoder-only transformer, evaluated with numpy.

One block computes

    L(x) = h + MLP(norm2(h)),   h = x + Attn(norm1(x))

with RMS norms, causal multi-head attention under rotary position
embeddings, and a gated SiLU MLP (dense) or a top-k mixture-of-experts
MLP on designated layers.  No biases, no dropout.  Weights are float32;
reductions accumulate in float64 (see numerics).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import Rng, matmul, rms_norm, rope_rotate_rows, silu, softmax

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int
    top_k: int
    expert_hidden: int


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    head_dim: int
    ffn_hidden: int
    vocab_size: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    moe: Optional[MoEConfig] = None
    moe_layer_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if min(self.n_layers, 0) < 0 or self.d_model <= 0 or self.vocab_size <= 0:
            raise ValueError("dimensions must be positive (n_layers may be 0)")
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError(
                f"n_heads*head_dim must equal d_model "
                f"({self.n_heads}*{self.head_dim} != {self.d_model})")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary embeddings")
        idx = tuple(self.moe_layer_indices)
        if len(set(idx)) != len(idx) or any(i < 0 or i >= self.n_layers for i in idx):
            raise ValueError("moe_layer_indices must be unique and in [0, n_layers)")
        if idx and self.moe is None:
            raise ValueError("moe_layer_indices given without moe config")
        if self.moe is not None and not 1 <= self.moe.top_k <= self.moe.n_experts:
            raise ValueError("moe top_k must be in [1, n_experts]")
        object.__setattr__(self, "moe_layer_indices", tuple(sorted(idx)))


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


@dataclass
class ExpertWeights:
    w_gate: np.ndarray  # (d, hidden)
    w_up: np.ndarray    # (d, hidden)
    w_down: np.ndarray  # (hidden, d)


@dataclass
class MoEWeights:
    gate: np.ndarray    # (d, n_experts)
    experts: list[ExpertWeights]


@dataclass
class LayerWeights:
    norm1_gain: np.ndarray  # (d,)
    wq: np.ndarray          # (d, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    norm2_gain: np.ndarray  # (d,)
    w_gate: Optional[np.ndarray] = None  # dense MLP (d, ffn)
    w_up: Optional[np.ndarray] = None    # (d, ffn)
    w_down: Optional[np.ndarray] = None  # (ffn, d)
    moe: Optional[MoEWeights] = None

    @property
    def is_moe(self) -> bool:
        return self.moe is not None


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray       # (vocab, d)
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray  # (d,)
    head: np.ndarray        # (d, vocab)


@dataclass(frozen=True)
class RoutingRecord:
    """Pinned routing for one MoE layer evaluation: per-token expert
    indices (ascending) and their softmax weights in matching order."""
    indices: np.ndarray  # (T, top_k) int64
    weights: np.ndarray  # (T, top_k) float32

    def same_experts(self, other: "RoutingRecord") -> bool:
        return self.indices.shape == other.indices.shape and \
            bool(np.array_equal(self.indices, other.indices))


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------


class KVCache:
    """Per-layer append-only key/value store with explicit crop.

    Entries are (n_heads, head_dim) rows indexed by absolute position.
    crop(layer, n) truncates to the first n entries and never reorders
    survivors.  When a log list is attached, every append/crop/mark is
    recorded as an event tuple for auditing.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int,
                 log: Optional[list] = None):
        self.n_heads = n_heads
        self.head_dim = head_dim
        self._k = [np.empty((0, n_heads, head_dim), dtype=np.float32) for _ in range(n_layers)]
        self._v = [np.empty((0, n_heads, head_dim), dtype=np.float32) for _ in range(n_layers)]
        self._len = [0] * n_layers
        self.log = log

    @property
    def n_layers(self) -> int:
        return len(self._len)

    def length(self, layer: int) -> int:
        return self._len[layer]

    def lengths(self) -> list[int]:
        return list(self._len)

    def append(self, layer: int, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        t = k_rows.shape[0]
        need = self._len[layer] + t
        if need > self._k[layer].shape[0]:
            cap = max(2 * self._k[layer].shape[0], need, 8)
            for buf in (self._k, self._v):
                grown = np.empty((cap, self.n_heads, self.head_dim), dtype=np.float32)
                grown[: self._len[layer]] = buf[layer][: self._len[layer]]
                buf[layer] = grown
        self._k[layer][self._len[layer]: need] = k_rows
        self._v[layer][self._len[layer]: need] = v_rows
        self._len[layer] = need
        if self.log is not None:
            self.log.append(("append", layer, t, need))

    def crop(self, layer: int, new_len: int) -> None:
        if not 0 <= new_len <= self._len[layer]:
            raise ValueError(f"crop to {new_len} outside [0, {self._len[layer]}]")
        old = self._len[layer]
        self._len[layer] = new_len
        if self.log is not None:
            self.log.append(("crop", layer, old, new_len))

    def view(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        n = self._len[layer]
        return self._k[layer][:n], self._v[layer][:n]

    def mark(self, label: str) -> None:
        if self.log is not None:
            self.log.append(("mark", label))


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def moe_mlp(x: np.ndarray, moe_w: MoEWeights, top_k: int,
            pinned: Optional[RoutingRecord] = None
            ) -> tuple[np.ndarray, RoutingRecord]:
    """Top-k mixture-of-experts MLP over token rows.

    Gating logits are x @ gate; the top_k experts per token are selected
    (ties break toward the lower index) and mixed with softmax weights
    over the selected logits.  A pinned record reuses both indices and
    weights, skipping the gate entirely.
    """
    t = x.shape[0]
    if pinned is not None:
        indices, weights = pinned.indices, pinned.weights
    else:
        logits = matmul(x, moe_w.gate)  # (T, E)
        order = np.argsort(-logits.astype(np.float64), axis=1, kind="stable")
        indices = np.sort(order[:, :top_k], axis=1).astype(np.int64)
        selected = np.take_along_axis(logits, indices, axis=1)
        weights = softmax(selected.astype(np.float64)).astype(np.float32)
    out = np.zeros_like(x)
    for e in range(len(moe_w.experts)):
        rows, slots = np.nonzero(indices == e)
        if rows.size == 0:
            continue
        ew = moe_w.experts[e]
        h = silu(matmul(x[rows], ew.w_gate)) * matmul(x[rows], ew.w_up)
        out[rows] += weights[rows, slots][:, None] * matmul(h, ew.w_down)
    assert out.shape == (t, x.shape[1])
    return out, RoutingRecord(indices=indices, weights=weights)


def block_forward(x: np.ndarray, layer: LayerWeights, config: ModelConfig,
                  cache: Optional[KVCache] = None, slot: Optional[int] = None,
                  use_cache: bool = False,
                  pinned_routing: Optional[RoutingRecord] = None
                  ) -> tuple[np.ndarray, Optional[RoutingRecord]]:
    """One pre-norm block over (T, d) state; returns (state, routing).

    With use_cache=True the block reads the cached past of its slot,
    appends the current tokens' K/V, and positions tokens after the
    cached length.  Without a cache it attends causally within x at
    positions 0..T-1.  Routing is None for dense layers.
    """
    t, d = x.shape
    h, hd = config.n_heads, config.head_dim
    xn = rms_norm(x, layer.norm1_gain, config.norm_eps)
    q = matmul(xn, layer.wq).reshape(t, h, hd)
    k = matmul(xn, layer.wk).reshape(t, h, hd)
    v = matmul(xn, layer.wv).reshape(t, h, hd)

    past = cache.length(slot) if (use_cache and cache is not None) else 0
    positions = past + np.arange(t)
    q = rope_rotate_rows(q, positions, config.rope_base)
    k = rope_rotate_rows(k, positions, config.rope_base)

    if use_cache and cache is not None:
        cache.append(slot, k, v)
        k_all, v_all = cache.view(slot)
    else:
        k_all, v_all = k, v
    p = k_all.shape[0]

    # causal mask: token t may attend absolute positions <= past + t
    mask = np.arange(p)[None, :] > (past + np.arange(t))[:, None]
    ctx = np.empty((t, h, hd), dtype=x.dtype)
    scale = 1.0 / np.sqrt(hd)
    for hh in range(h):
        scores = matmul(q[:, hh, :], k_all[:, hh, :].T) * np.asarray(scale, dtype=x.dtype)
        scores = np.where(mask, np.array(-np.inf, dtype=scores.dtype), scores)
        ctx[:, hh, :] = matmul(softmax(scores), v_all[:, hh, :])
    attn_out = matmul(ctx.reshape(t, d), layer.wo)
    hmid = x + attn_out

    hn = rms_norm(hmid, layer.norm2_gain, config.norm_eps)
    routing = None
    if layer.is_moe:
        mlp_out, routing = moe_mlp(hn, layer.moe, config.moe.top_k, pinned_routing)
    else:
        mlp_out = matmul(silu(matmul(hn, layer.w_gate)) * matmul(hn, layer.w_up),
                         layer.w_down)
    return hmid + mlp_out, routing


def embed_tokens(tokens: np.ndarray, model: Model) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError("tokens must be a 1-D sequence")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise ValueError("token id out of vocabulary range")
    return model.embed[tokens]


def lm_head(x: np.ndarray, model: Model) -> np.ndarray:
    """Final RMS norm followed by the vocabulary projection."""
    xn = rms_norm(x, model.final_norm_gain, model.config.norm_eps)
    return matmul(xn, model.head)


def model_forward(tokens: np.ndarray, model: Model,
                  cache: Optional[KVCache] = None,
                  use_cache: bool = False) -> np.ndarray:
    """Plain (unlooped) forward pass: (T,) token ids -> (T, vocab) logits."""
    x = embed_tokens(tokens, model)
    for i, layer in enumerate(model.layers):
        x, _ = block_forward(x, layer, model.config, cache=cache, slot=i,
                             use_cache=use_cache)
    return lm_head(x, model)


# ---------------------------------------------------------------------------
# synthetic weights
# ---------------------------------------------------------------------------


def random_model(config: ModelConfig, seed: int) -> Model:
    """Seeded synthetic weights: embeddings std 1, projections std 1/sqrt(fan_in)."""
    rng = Rng(seed)

    def mat(rows, cols, std):
        return rng.normal((rows, cols), std=std).astype(np.float32)

    d, ffn, v = config.d_model, config.ffn_hidden, config.vocab_size
    proj_std = 1.0 / np.sqrt(d)
    embed = mat(v, d, 1.0)
    layers = []
    for i in range(config.n_layers):
        lw = LayerWeights(
            norm1_gain=np.ones(d, dtype=np.float32),
            wq=mat(d, d, proj_std), wk=mat(d, d, proj_std),
            wv=mat(d, d, proj_std), wo=mat(d, d, proj_std),
            norm2_gain=np.ones(d, dtype=np.float32),
        )
        if i in config.moe_layer_indices:
            mc = config.moe
            eh = mc.expert_hidden
            lw.moe = MoEWeights(
                gate=mat(d, mc.n_experts, proj_std),
                experts=[ExpertWeights(w_gate=mat(d, eh, proj_std),
                                       w_up=mat(d, eh, proj_std),
                                       w_down=mat(eh, d, 1.0 / np.sqrt(eh)))
                         for _ in range(mc.n_experts)],
            )
        else:
            lw.w_gate = mat(d, ffn, proj_std)
            lw.w_up = mat(d, ffn, proj_std)
            lw.w_down = mat(ffn, d, 1.0 / np.sqrt(ffn))
        layers.append(lw)
    return Model(config=config, embed=embed, layers=layers,
                 final_norm_gain=np.ones(d, dtype=np.float32),
                 head=mat(d, v, proj_std))
