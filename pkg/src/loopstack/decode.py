"""KV-cache-correct prefill and decode under looped execution.

Protocol (both phases leave the cache exactly as large as an unlooped
run would):

* prefill: pre-loop layers run with the cache on; the loop body runs
  entirely cache-less; afterwards one stash pass through layers a..b
  writes the canonical KV, taking the post-strategy state (cache
  strategy "last"), the window input ("first") or nothing ("none");
  post-loop layers continue from the looped state with the cache on.
* decode: loop-body evaluations read the cached past and append the
  current token, then crop every loop layer back to its snapshot length,
  so bodies are net-zero writers no matter how many evaluations the
  strategy spends; the stash pass then writes the single canonical entry
  per loop layer.  Net cache growth is exactly one entry per layer per
  decode step (zero for loop layers under "none").

Block mode snapshots the whole window and iterates it as one operator;
layer mode nests snapshot/iterate/crop/stash per layer and pins each
MoE layer's routing from its first evaluation of that step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import AuditError
from .loop import LoopConfig
from .model import (KVCache, Model, RoutingRecord, block_forward, embed_tokens,
                    lm_head)
from .numerics import Rng, softmax
from .strategies import apply_strategy


# ---------------------------------------------------------------------------
# prefill
# ---------------------------------------------------------------------------


def prefill(tokens: np.ndarray, model: Model, config: LoopConfig,
            log: Optional[list] = None) -> tuple[np.ndarray, KVCache]:
    """Looped prefill: (T,) token ids -> ((T, vocab) logits, primed cache)."""
    cfg = model.config
    config.window.validate_for(cfg.n_layers)
    cache = KVCache(cfg.n_layers, cfg.n_heads, cfg.head_dim, log=log)
    cache.mark("prefill")
    x = embed_tokens(tokens, model)
    for i in range(0, config.window.a):
        x, _ = block_forward(x, model.layers[i], cfg, cache=cache, slot=i,
                             use_cache=True)
    x_a = x
    cache.mark("loop_body")
    from .loop import run_window  # pure evaluators; no cache traffic
    x = run_window(x, model, config)
    cache.mark("loop_end")
    if config.cache_strategy != "none":
        z = x if config.cache_strategy == "last" else x_a
        for i in config.window.layers():
            z, _ = block_forward(z, model.layers[i], cfg, cache=cache, slot=i,
                                 use_cache=True)
    for i in range(config.window.b + 1, cfg.n_layers):
        x, _ = block_forward(x, model.layers[i], cfg, cache=cache, slot=i,
                             use_cache=True)
    cache.mark("prefill_end")
    return lm_head(x, model), cache


# ---------------------------------------------------------------------------
# decode steps
# ---------------------------------------------------------------------------


def _cropping_evaluator(model: Model, layers: range, cache: KVCache,
                        snapshots: dict[int, int], crop_enabled: bool,
                        pin: Optional[list] = None) -> Callable:
    """Evaluator running `layers` with cache reads; every call appends one
    entry per layer and crops back to the snapshot, so evaluations are
    net-zero cache writers.  `pin` (layer mode) carries the routing record
    pinned at the first call."""

    def g(y: np.ndarray) -> np.ndarray:
        cache.mark("eval")
        for i in layers:
            out = block_forward(y, model.layers[i], model.config, cache=cache,
                                slot=i, use_cache=True,
                                pinned_routing=pin[0] if pin is not None else None)
            y, rec = out
            if pin is not None and pin[0] is None:
                pin[0] = rec
        if crop_enabled:
            for i in layers:
                cache.crop(i, snapshots[i])
        for i in layers:
            if cache.length(i) != snapshots[i]:
                raise AuditError(
                    f"loop body left layer {i} cache at {cache.length(i)} "
                    f"entries, snapshot was {snapshots[i]}")
        cache.mark("eval_end")
        return y

    return g


def decode_step_block(x: np.ndarray, model: Model, config: LoopConfig,
                      cache: KVCache, crop_enabled: bool = True) -> np.ndarray:
    """One looped decode step in block mode: (1, d) token state in, state
    after the post-loop layers out (final norm is the caller's lm_head)."""
    cfg = model.config
    for i in range(0, config.window.a):
        x, _ = block_forward(x, model.layers[i], cfg, cache=cache, slot=i,
                             use_cache=True)
    x_a = x
    snapshots = {i: cache.length(i) for i in config.window.layers()}
    g = _cropping_evaluator(model, config.window.layers(), cache, snapshots,
                            crop_enabled)
    x = apply_strategy(x, g, config.strategy)
    if config.cache_strategy != "none":
        z = x if config.cache_strategy == "last" else x_a
        for i in config.window.layers():
            z, _ = block_forward(z, model.layers[i], cfg, cache=cache, slot=i,
                                 use_cache=True)
    for i in range(config.window.b + 1, cfg.n_layers):
        x, _ = block_forward(x, model.layers[i], cfg, cache=cache, slot=i,
                             use_cache=True)
    return x


def decode_step_layer(x: np.ndarray, model: Model, config: LoopConfig,
                      cache: KVCache, crop_enabled: bool = True) -> np.ndarray:
    """One looped decode step in layer mode: per-layer snapshot / iterate-K
    / crop / stash, with MoE routing pinned within each layer's loop."""
    cfg = model.config
    for i in range(0, config.window.a):
        x, _ = block_forward(x, model.layers[i], cfg, cache=cache, slot=i,
                             use_cache=True)
    x_a = x
    for i in config.window.layers():
        snapshots = {i: cache.length(i)}
        pin: list[Optional[RoutingRecord]] = [None]
        g = _cropping_evaluator(model, range(i, i + 1), cache, snapshots,
                                crop_enabled, pin=pin)
        x = apply_strategy(x, g, config.strategy)
        if config.cache_strategy != "none":
            z = x if config.cache_strategy == "last" else x_a
            z, _ = block_forward(z, model.layers[i], cfg, cache=cache, slot=i,
                                 use_cache=True)
    for i in range(config.window.b + 1, cfg.n_layers):
        x, _ = block_forward(x, model.layers[i], cfg, cache=cache, slot=i,
                             use_cache=True)
    return x


def decode_step_plain(x: np.ndarray, model: Model, cache: KVCache) -> np.ndarray:
    """Unlooped decode step: every layer once, with the cache on."""
    for i, layer in enumerate(model.layers):
        x, _ = block_forward(x, layer, model.config, cache=cache, slot=i,
                             use_cache=True)
    return x


# ---------------------------------------------------------------------------
# sampling and generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sampler:
    """'greedy' takes the argmax (ties to the lowest id); 'temperature'
    samples from softmax(logits / temperature) using the run RNG."""
    kind: str = "greedy"
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature"):
            raise ValueError(f"unknown sampler {self.kind!r}")
        if self.kind == "temperature" and self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def __call__(self, logits: np.ndarray, rng: Optional[Rng] = None) -> int:
        if self.kind == "greedy":
            return int(np.argmax(logits))
        p = softmax(logits.astype(np.float64) / self.temperature)
        u = rng.uniform()
        return int(np.searchsorted(np.cumsum(p), u, side="right").clip(0, len(p) - 1))


@dataclass
class GenResult:
    prompt: list[int]
    tokens: list[int]          # generated tokens, in order
    step_ms: list[float]       # per generated token (prefill for the first)
    looped_steps: list[bool]   # whether each token's step ran the loop


def generate(tokens: np.ndarray, model: Model, config: LoopConfig,
             max_new: int, sampler: Sampler = Sampler("greedy"),
             rng: Optional[Rng] = None, log: Optional[list] = None,
             crop_enabled: bool = True) -> GenResult:
    """Prefill the prompt (always looped), then decode max_new tokens.

    Decode step s (1-based, processing generated token s) runs the loop
    when config.decode_mode.loops_at(s); otherwise it is a plain cached
    pass.  The first generated token comes from the prefill logits.
    """
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    result = GenResult(prompt=[int(t) for t in np.asarray(tokens)], tokens=[],
                       step_ms=[], looped_steps=[])
    if max_new == 0:
        return result
    t0 = time.perf_counter()
    logits, cache = prefill(tokens, model, config, log=log)
    tok = sampler(logits[-1], rng)
    result.tokens.append(tok)
    result.step_ms.append((time.perf_counter() - t0) * 1e3)
    result.looped_steps.append(True)  # prefill is always looped

    step_fn = decode_step_layer if config.mode == "layer" else decode_step_block
    for s in range(1, max_new):
        t0 = time.perf_counter()
        x = embed_tokens(np.array([tok]), model)
        looped = config.decode_mode.loops_at(s)
        cache.mark(f"step {s} looped={int(looped)}")
        if looped:
            x = step_fn(x, model, config, cache, crop_enabled=crop_enabled)
        else:
            x = decode_step_plain(x, model, cache)
        tok = sampler(lm_head(x, model)[0], rng)
        result.tokens.append(tok)
        result.step_ms.append((time.perf_counter() - t0) * 1e3)
        result.looped_steps.append(looped)
    cache.mark("end")
    return result


# ---------------------------------------------------------------------------
# cache audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    ok: bool
    lines: list[str] = field(default_factory=list)

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def _replay_deltas(events, n_layers):
    """Net per-layer length deltas for a slice of the event stream."""
    delta = [0] * n_layers
    for ev in events:
        if ev[0] == "append":
            delta[ev[1]] += ev[2]
        elif ev[0] == "crop":
            delta[ev[1]] += ev[3] - ev[2]
    return delta


def audit_events(log: list, model: Model, config: LoopConfig,
                 prompt_len: int) -> AuditReport:
    """Verify the cache protocol from a recorded event stream.

    Checks: the prefill loop body touches the cache not at all and
    prefill leaves prompt_len entries per layer (zero for loop layers
    under cache strategy "none"); every decode-time loop-body evaluation
    nets zero entries (appends balanced by crops); and every decode step
    nets exactly one entry per layer (zero for loop layers under "none"
    on looped steps).
    """
    n = model.config.n_layers
    loop_layers = set(config.window.layers())
    report = AuditReport(ok=True)

    def fail(msg):
        report.ok = False
        report.lines.append(f"FAIL {msg}")

    # split at the top-level marks; nested eval/loop_body marks stay inside
    regions: list[tuple[str, list]] = []
    label, current = None, []
    for ev in log:
        if ev[0] == "mark" and (ev[1] in ("prefill", "end") or ev[1].startswith("step ")):
            if label is not None:
                regions.append((label, current))
            label, current = ev[1], []
        else:
            current.append(ev)
    if label is not None:
        regions.append((label, current))

    for label, events in regions:
        if label == "end":
            continue
        if label == "prefill":
            in_body, body_traffic = False, 0
            for ev in events:
                if ev[0] == "mark":
                    in_body = {"loop_body": True, "loop_end": False}.get(ev[1], in_body)
                elif in_body:
                    body_traffic += 1
            if body_traffic:
                fail(f"prefill loop body produced {body_traffic} cache events (expected none)")
            delta = _replay_deltas(events, n)
            ok_here = True
            for i in range(n):
                expect = 0 if (i in loop_layers and config.cache_strategy == "none") \
                    else prompt_len
                if delta[i] != expect:
                    fail(f"prefill: layer {i} has {delta[i]} entries, expected {expect}")
                    ok_here = False
            if ok_here:
                report.lines.append(
                    f"prefill: {prompt_len} entries/layer"
                    + (" (loop layers 0 under cache=none)"
                       if config.cache_strategy == "none" else ""))
            continue

        # decode step region
        looped = label.endswith("looped=1")
        ok_here = True
        in_eval, eval_events, eval_idx = False, [], 0
        for ev in events:
            if ev[0] == "mark" and ev[1] == "eval":
                in_eval, eval_events = True, []
            elif ev[0] == "mark" and ev[1] == "eval_end":
                for i, d in enumerate(_replay_deltas(eval_events, n)):
                    if d != 0:
                        fail(f"{label} eval {eval_idx}: netted {d} entries at layer {i}")
                        ok_here = False
                in_eval, eval_idx = False, eval_idx + 1
            elif in_eval and ev[0] != "mark":
                eval_events.append(ev)
        total = _replay_deltas(events, n)
        for i in range(n):
            expect = 0 if (looped and i in loop_layers
                           and config.cache_strategy == "none") else 1
            if total[i] != expect:
                fail(f"{label}: layer {i} netted {total[i]} entries, expected {expect}")
                ok_here = False
        if ok_here:
            note = " (loop layers 0)" if (looped and config.cache_strategy == "none") else ""
            report.lines.append(f"{label}: {eval_idx} balanced evals, net delta 1/layer{note}")
    return report


def run_cache_audit(model: Model, config: LoopConfig, prompt: np.ndarray,
                    max_new: int, sampler: Sampler = Sampler("greedy"),
                    rng: Optional[Rng] = None,
                    crop_enabled: bool = True) -> AuditReport:
    """Generate with an instrumented cache and audit the event stream.

    With crop_enabled=False (negative-control hook) the in-body length
    check trips immediately and the report carries the failure."""
    log: list = []
    try:
        generate(prompt, model, config, max_new, sampler=sampler, rng=rng,
                 log=log, crop_enabled=crop_enabled)
    except AuditError as exc:
        return AuditReport(ok=False, lines=[f"FAIL in-flight: {exc}"])
    report = audit_events(log, model, config, prompt_len=len(prompt))
    report.lines.append("audit " + ("OK" if report.ok else "FAILED"))
    return report
