"""Looped execution of a contiguous mid-stack layer window.

With blocks L_0..L_{N-1} and a window [a, b], the window operator is
g = L_b o ... o L_a and its residual field F_g(x) = g(x) - x telescopes
into the per-layer residuals along the pass.  looped_forward re-applies
the window under a strategy, either on the whole window (block mode:
g^(K)-style) or layer by layer (layer mode: L_b^K o ... o L_a^K).  In
layer mode, a mixture-of-experts layer's routing is pinned from its
first evaluation across all K stage/sub-step evaluations of that layer;
block mode deliberately re-routes every iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .model import Model, RoutingRecord, block_forward, embed_tokens, lm_head
from .strategies import Strategy, apply_strategy, strategy_label

DEFAULT_WINDOW_FRACTION = 0.525
DEFAULT_WINDOW_WIDTH = 4

CACHE_STRATEGIES = ("last", "first", "none")
MODES = ("block", "layer")


@dataclass(frozen=True)
class LoopWindow:
    """Inclusive contiguous layer range [a, b]."""
    a: int
    b: int

    def __post_init__(self):
        if self.a < 0 or self.b < self.a:
            raise ValueError(f"window must satisfy 0 <= a <= b, got [{self.a}, {self.b}]")

    def validate_for(self, n_layers: int) -> None:
        if self.b >= n_layers:
            raise ValueError(f"window [{self.a}, {self.b}] exceeds {n_layers} layers")

    @property
    def width(self) -> int:
        return self.b - self.a + 1

    def layers(self) -> range:
        return range(self.a, self.b + 1)


@dataclass(frozen=True)
class DecodeMode:
    """When decode steps loop: 'bypass' (never; prefill only), 'full'
    (every step), or 'first_n' (decode steps for the first n generated
    tokens only; first_n(0) == bypass)."""
    kind: str
    n: int = 0

    def __post_init__(self):
        if self.kind not in ("bypass", "full", "first_n"):
            raise ValueError(f"unknown decode mode {self.kind!r}")
        if self.kind == "first_n" and self.n < 0:
            raise ValueError("first_n requires n >= 0")

    def loops_at(self, step: int) -> bool:
        """True if decode step `step` (1-based; step s processes generated
        token s) runs the loop."""
        if self.kind == "full":
            return True
        if self.kind == "bypass":
            return False
        return step <= self.n


@dataclass(frozen=True)
class LoopConfig:
    window: LoopWindow
    strategy: Strategy
    mode: str = "block"
    cache_strategy: str = "last"
    decode_mode: DecodeMode = field(default_factory=lambda: DecodeMode("bypass"))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cache_strategy not in CACHE_STRATEGIES:
            raise ValueError(f"cache_strategy must be one of {CACHE_STRATEGIES}, "
                             f"got {self.cache_strategy!r}")

    def describe(self) -> str:
        return (f"window=[{self.window.a},{self.window.b}] mode={self.mode} "
                f"strategy={strategy_label(self.strategy)} "
                f"cache={self.cache_strategy} decode={self.decode_mode.kind}")


def default_window(n_layers: int, width: int = DEFAULT_WINDOW_WIDTH,
                   fraction: float = DEFAULT_WINDOW_FRACTION) -> LoopWindow:
    """Width-`width` window whose center is nearest fraction*n_layers
    (ties round the start down); clamped to the stack."""
    if not 1 <= width <= n_layers:
        raise ValueError(f"width must be in [1, {n_layers}], got {width}")
    target_start = fraction * n_layers - (width - 1) / 2.0
    a = math.ceil(target_start - 0.5)  # round half down
    a = min(max(a, 0), n_layers - width)
    return LoopWindow(a, a + width - 1)


# ---------------------------------------------------------------------------
# window operators (pure, cache-less)
# ---------------------------------------------------------------------------


def window_operator(model: Model, window: LoopWindow) -> Callable[[np.ndarray], np.ndarray]:
    """g = L_b o ... o L_a with no KV reads or writes; MoE layers re-route
    on every call."""
    window.validate_for(model.config.n_layers)

    def g(x: np.ndarray) -> np.ndarray:
        for i in window.layers():
            x, _ = block_forward(x, model.layers[i], model.config)
        return x

    return g


def residual_field(model: Model, window: LoopWindow) -> Callable[[np.ndarray], np.ndarray]:
    """F_g(x) = g(x) - x, the field the loop integrates."""
    g = window_operator(model, window)
    return lambda x: g(x) - x


def layer_operator(model: Model, layer_index: int,
                   pin_routing: bool = True) -> Callable[[np.ndarray], np.ndarray]:
    """Single-layer evaluator; when pin_routing is set, an MoE layer's
    routing record from the first call is reused by every later call."""
    layer = model.layers[layer_index]
    pinned: list[Optional[RoutingRecord]] = [None]

    def g(x: np.ndarray) -> np.ndarray:
        out, rec = block_forward(x, layer, model.config,
                                 pinned_routing=pinned[0] if pin_routing else None)
        if pin_routing and pinned[0] is None:
            pinned[0] = rec
        return out

    return g


def run_window(x: np.ndarray, model: Model, config: LoopConfig,
               g_override: Optional[Callable] = None) -> np.ndarray:
    """Apply the strategy over the window in the configured mode.

    `g_override` substitutes the window evaluator in block mode (used by
    the decode path, which needs cache-reading evaluators)."""
    if config.mode == "block":
        g = g_override if g_override is not None else window_operator(model, config.window)
        return apply_strategy(x, g, config.strategy)
    # layer mode: fresh strategy state and fresh routing pin per layer
    for i in config.window.layers():
        x = apply_strategy(x, layer_operator(model, i), config.strategy)
    return x


def looped_forward(tokens: np.ndarray, model: Model, config: LoopConfig) -> np.ndarray:
    """Cache-less forward with the window re-applied under the strategy:
    (T,) token ids -> (T, vocab) logits."""
    config.window.validate_for(model.config.n_layers)
    x = embed_tokens(tokens, model)
    for i in range(0, config.window.a):
        x, _ = block_forward(x, model.layers[i], model.config)
    x = run_window(x, model, config)
    for i in range(config.window.b + 1, model.config.n_layers):
        x, _ = block_forward(x, model.layers[i], model.config)
    return lm_head(x, model)
