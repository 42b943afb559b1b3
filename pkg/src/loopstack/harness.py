"""Task runners behind the CLI subcommands.

Each runner takes a parsed RunConfig, writes its report files into
``out_dir``, and returns the list of paths written.  Numeric trouble is
reported in-band where the schema allows it (nan deviations, diverged
flags); exceptions are reserved for unusable runs (bad config, failed
audit, a reference integration with no surviving probes).
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import numpy as np

from .config import GenSpec, RunConfig, parse_strategy, parse_window
from .decode import Sampler, generate, run_cache_audit
from .errors import AuditError, ConfigError, DivergenceError
from .loop import LoopConfig, LoopWindow, window_operator, run_window
from .model import Model, ModelConfig, block_forward, embed_tokens, random_model
from .numerics import Rng, deterministic_mode, is_divergent
from .strategies import (CountingEvaluator, RK4_TABLEAU, RKGeneric, Strategy,
                         apply_strategy, strategy_iterations, strategy_label,
                         strategy_passes)
from .toy import ToyConfig, ToyLabResult, run_lab
from .weights_io import load_weights, save_weights

REFERENCE_SUBSTEPS = 64

FIDELITY_COLUMNS = ("strategy", "K", "mode", "mean_dev", "p90_dev",
                    "fwd_passes", "wall_ms")
SWEEP_COLUMNS = FIDELITY_COLUMNS + ("window_a", "window_b", "diverged")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def resolve_model(cfg: RunConfig) -> Model:
    if cfg.model is None:
        raise ConfigError("this task requires a 'model' section")
    if cfg.model.path is not None:
        return load_weights(cfg.model.path)
    return random_model(cfg.model.synthetic, cfg.model.seed)


def _wall_ms(t0: float) -> float:
    if deterministic_mode():
        return 0.0
    return round((time.perf_counter() - t0) * 1e3, 3)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return str(value)
    return str(value)


def write_csv(path: str, columns: tuple[str, ...], rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def probe_states(model: Model, window: LoopWindow, n_probes: int,
                 prompt_len: int, seed: int) -> list[np.ndarray]:
    """Pre-window activations of seeded random prompts: n_probes arrays
    of shape (prompt_len, d_model)."""
    if n_probes < 1 or prompt_len < 1:
        raise ConfigError("n_probes and prompt_len must be >= 1")
    rng = Rng(seed)
    states = []
    for p in range(n_probes):
        tokens = rng.spawn(p).integers(model.config.vocab_size, (prompt_len,))
        x = embed_tokens(tokens, model)
        for i in range(window.a):
            x, _ = block_forward(x, model.layers[i], model.config)
        states.append(x)
    return states


def reference_endpoint(g: Callable[[np.ndarray], np.ndarray],
                       x: np.ndarray) -> np.ndarray:
    """Endpoint of the window field at t=1 via fixed-step RK4."""
    ref = RKGeneric(tableau=RK4_TABLEAU, h=1.0 / REFERENCE_SUBSTEPS,
                    steps=REFERENCE_SUBSTEPS)
    with np.errstate(over="ignore", invalid="ignore"):
        return apply_strategy(x, g, ref)


def rms_deviation(a: np.ndarray, b: np.ndarray) -> float:
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def _percentile90(values: list[float]) -> float:
    return float(np.percentile(np.array(values, dtype=np.float64), 90.0))


# ---------------------------------------------------------------------------
# fidelity
# ---------------------------------------------------------------------------


def _strategy_row(model: Model, window: LoopWindow, mode: str, s: Strategy,
                  probes: list[np.ndarray], refs: list[Optional[np.ndarray]]
                  ) -> dict:
    """Deviation-vs-reference stats for one strategy over the probe set."""
    g = window_operator(model, window)
    devs: list[float] = []
    diverged = False
    measured: Optional[int] = None
    t0 = time.perf_counter()
    for x, ref in zip(probes, refs):
        if ref is None:
            diverged = True
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            if mode == "block":
                counting = CountingEvaluator(g)
                out = apply_strategy(x, counting, s)
                measured = counting.count
            else:
                lcfg = LoopConfig(window=window, strategy=s, mode=mode)
                out = run_window(x, model, lcfg)
        if is_divergent(out):
            diverged = True
        else:
            devs.append(rms_deviation(out, ref))
    if measured is not None and measured != strategy_passes(s):
        raise AuditError(f"{strategy_label(s)}: measured {measured} window "
                         f"passes, declared {strategy_passes(s)}")
    ok = devs and not diverged
    return {
        "strategy": strategy_label(s),
        "K": strategy_iterations(s),
        "mode": mode,
        "mean_dev": float(np.mean(devs)) if ok else float("nan"),
        "p90_dev": _percentile90(devs) if ok else float("nan"),
        "fwd_passes": strategy_passes(s),
        "wall_ms": _wall_ms(t0),
        "diverged": diverged,
    }


def run_fidelity(cfg: RunConfig) -> list[str]:
    if cfg.fidelity is None:
        raise ConfigError("fidelity task requires a 'fidelity' section")
    model = resolve_model(cfg)
    n_layers = model.config.n_layers
    raw = cfg.loop_raw or {}
    mode = raw.get("mode", "block")
    if mode not in ("block", "layer"):
        raise ConfigError(f"loop.mode must be 'block' or 'layer', got {mode!r}")
    window = parse_window(raw.get("window"), n_layers)
    strategies = [parse_strategy(s, f"fidelity.strategies[{i}]")
                  for i, s in enumerate(cfg.fidelity["strategies"])]
    n_probes = int(cfg.fidelity.get("n_probes", 8))
    prompt_len = int(cfg.fidelity.get("prompt_len", 16))

    probes = probe_states(model, window, n_probes, prompt_len, cfg.seed)
    g = window_operator(model, window)
    refs: list[Optional[np.ndarray]] = []
    for x in probes:
        ref = reference_endpoint(g, x)
        refs.append(None if is_divergent(ref) else ref)
    if all(r is None for r in refs):
        raise DivergenceError("reference integration diverged on every probe")

    rows = [_strategy_row(model, window, mode, s, probes, refs)
            for s in strategies]
    out_csv = os.path.join(cfg.out_dir, "fidelity.csv")
    write_csv(out_csv, FIDELITY_COLUMNS, rows)
    from .plots import fidelity_figure
    out_png = os.path.join(cfg.out_dir, "fidelity.png")
    fidelity_figure(rows, out_png)
    return [out_csv, out_png]


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def run_sweep(cfg: RunConfig) -> list[str]:
    if cfg.sweep is None:
        raise ConfigError("sweep task requires a 'sweep' section")
    model = resolve_model(cfg)
    n_layers = model.config.n_layers
    raw = cfg.loop_raw or {}
    mode = raw.get("mode", "block")
    if mode not in ("block", "layer"):
        raise ConfigError(f"loop.mode must be 'block' or 'layer', got {mode!r}")
    strategies = [parse_strategy(s, f"sweep.strategies[{i}]")
                  for i, s in enumerate(cfg.sweep["strategies"])]
    windows = [parse_window(w, n_layers, f"sweep.windows[{i}]")
               for i, w in enumerate(cfg.sweep["windows"])]
    if strategies and not windows:
        raise ConfigError("sweep.windows must be non-empty")
    n_probes = int(cfg.sweep.get("n_probes", 4))
    prompt_len = int(cfg.sweep.get("prompt_len", 8))

    # Per-window probe/reference states are shared read-only by the cells.
    per_window: dict[LoopWindow, tuple[list, list]] = {}
    for window in windows:
        if window in per_window:
            continue
        probes = probe_states(model, window, n_probes, prompt_len, cfg.seed)
        g = window_operator(model, window)
        refs = [reference_endpoint(g, x) for x in probes]
        refs = [None if is_divergent(r) else r for r in refs]
        per_window[window] = (probes, refs)

    def cell(s: Strategy, window: LoopWindow) -> dict:
        probes, refs = per_window[window]
        row = _strategy_row(model, window, mode, s, probes, refs)
        row["window_a"] = window.a
        row["window_b"] = window.b
        return row

    workers = int(os.environ.get("LOOPSTACK_THREADS", 0)) or os.cpu_count() or 1
    rows: list[dict] = []
    if strategies:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(cell, s, w)
                       for s in strategies for w in windows]
            rows = [f.result() for f in futures]
    out_csv = os.path.join(cfg.out_dir, "sweep.csv")
    write_csv(out_csv, SWEEP_COLUMNS, rows)
    from .plots import sweep_figure
    out_png = os.path.join(cfg.out_dir, "sweep.png")
    sweep_figure(rows, out_png)
    return [out_csv, out_png]


# ---------------------------------------------------------------------------
# toy lab
# ---------------------------------------------------------------------------


def _toy_config(cfg: RunConfig) -> ToyConfig:
    t = cfg.toy or {}
    kwargs = {}
    for key in ("seed", "steps", "n_train", "n_test", "resolution"):
        if key in t:
            kwargs[key] = int(t[key])
    if "noise" in t:
        kwargs["noise"] = float(t["noise"])
    if "ks" in t:
        kwargs["ks"] = tuple(int(k) for k in t["ks"])
    if "bounds" in t and t["bounds"] is not None:
        b = t["bounds"]
        if len(b) != 4:
            raise ConfigError("toy.bounds must be [z1min, z1max, z2min, z2max]")
        kwargs["bounds"] = tuple(float(v) for v in b)
    try:
        return ToyConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"toy: {exc}") from exc


def toy_reports(res: ToyLabResult, out_dir: str) -> list[str]:
    paths = []

    train_csv = os.path.join(out_dir, "toy_train.csv")
    write_csv(train_csv, ("step", "loss"),
              [{"step": i, "loss": float(l)} for i, l in enumerate(res.losses)])
    paths.append(train_csv)

    mse_csv = os.path.join(out_dir, "toy_mse.csv")
    mse_rows = [{"kind": kind, "K": k, "mse": float(v)}
                for (kind, k), v in res.mse_table.items()]
    write_csv(mse_csv, ("kind", "K", "mse"), mse_rows)
    paths.append(mse_csv)

    grid_csv = os.path.join(out_dir, "toy_grid.csv")
    grid_rows = []
    for i, z2 in enumerate(res.z2_axis):
        for j, z1 in enumerate(res.z1_axis):
            grid_rows.append({"z1": float(z1), "z2": float(z2),
                              "median_loss": float(res.grid[i, j])})
    write_csv(grid_csv, ("z1", "z2", "median_loss"), grid_rows)
    paths.append(grid_csv)

    pts_csv = os.path.join(out_dir, "toy_endpoints.csv")
    pts_rows = []
    for (kind, k), pts in res.endpoints.items():
        for idx in range(pts.shape[0]):
            pts_rows.append({"K": k, "kind": kind, "point_index": idx,
                             "z1": float(pts[idx, 0]), "z2": float(pts[idx, 1])})
    write_csv(pts_csv, ("K", "kind", "point_index", "z1", "z2"), pts_rows)
    paths.append(pts_csv)
    return paths


def run_toy(cfg: RunConfig) -> list[str]:
    res = run_lab(_toy_config(cfg))
    paths = toy_reports(res, cfg.out_dir)
    summary = os.path.join(cfg.out_dir, "toy_summary.txt")
    base = res.mse_table[("baseline", 1)]
    with open(summary, "w") as f:
        f.write(f"gradcheck_max_rel={float(res.gradcheck)!r}\n")
        f.write(f"baseline_mse={base!r}\n")
        for (kind, k), v in sorted(res.mse_table.items()):
            if kind == "baseline":
                continue
            f.write(f"{kind}_K{k}_mse={v!r} ratio_vs_baseline={v / base!r}\n")
    paths.append(summary)
    from .plots import toy_figure
    out_png = os.path.join(cfg.out_dir, "toy_landscape.png")
    toy_figure(res, out_png)
    paths.append(out_png)
    return paths


# ---------------------------------------------------------------------------
# generation / cache audit / model synthesis
# ---------------------------------------------------------------------------


def _gen_prompt(spec: GenSpec, vocab: int, seed: int) -> np.ndarray:
    if spec.prompt is not None:
        prompt = np.array(spec.prompt, dtype=np.int64)
        if prompt.size == 0:
            raise ConfigError("gen.prompt must be non-empty")
        if prompt.min() < 0 or prompt.max() >= vocab:
            raise ConfigError("gen.prompt contains out-of-vocab ids")
        return prompt
    return Rng(seed).spawn(101).integers(vocab, (spec.random_len,))


def run_gen(cfg: RunConfig) -> list[str]:
    if cfg.gen is None:
        raise ConfigError("gen task requires a 'gen' section")
    model = resolve_model(cfg)
    lcfg = cfg.loop_config(model.config.n_layers)
    prompt = _gen_prompt(cfg.gen, model.config.vocab_size, cfg.seed)
    sampler = Sampler(cfg.gen.sampler_kind, temperature=cfg.gen.temperature)
    rng = Rng(cfg.seed).spawn(102)
    result = generate(prompt, model, lcfg, cfg.gen.max_new,
                      sampler=sampler, rng=rng)
    if any(not np.isfinite(ms) for ms in result.step_ms):
        raise DivergenceError("generation produced non-finite step timings")

    trace_csv = os.path.join(cfg.out_dir, "gen_trace.csv")
    rows = []
    for i, tok in enumerate(result.tokens):
        ms = 0.0 if deterministic_mode() else round(result.step_ms[i], 3)
        rows.append({"step": i, "token_id": tok,
                     "looped": result.looped_steps[i], "wall_ms": ms})
    write_csv(trace_csv, ("step", "token_id", "looped", "wall_ms"), rows)

    tokens_txt = os.path.join(cfg.out_dir, "gen_tokens.txt")
    with open(tokens_txt, "w") as f:
        f.write("prompt: " + " ".join(str(t) for t in result.prompt) + "\n")
        f.write("tokens: " + " ".join(str(t) for t in result.tokens) + "\n")
    return [trace_csv, tokens_txt]


def run_cache_audit_task(cfg: RunConfig) -> list[str]:
    model = resolve_model(cfg)
    lcfg = cfg.loop_config(model.config.n_layers)
    prompt_len = int(cfg.cache_audit.get("prompt_len", 8))
    max_new = int(cfg.cache_audit.get("max_new", 64))
    if prompt_len < 1 or max_new < 1:
        raise ConfigError("cache_audit: prompt_len and max_new must be >= 1")
    prompt = Rng(cfg.seed).spawn(103).integers(model.config.vocab_size,
                                               (prompt_len,))
    report = run_cache_audit(model, lcfg, prompt, max_new)
    out_txt = os.path.join(cfg.out_dir, "cache_audit.txt")
    with open(out_txt, "w") as f:
        f.write(report.text() + "\n")
    if not report.ok:
        raise AuditError(f"cache audit failed; details in {out_txt}")
    return [out_txt]


def run_make_model(cfg: RunConfig) -> list[str]:
    if cfg.model is None or cfg.model.synthetic is None:
        raise ConfigError("make-model requires model.synthetic")
    filename = cfg.make_model.get("filename", "model.tflt")
    model = random_model(cfg.model.synthetic, cfg.model.seed)
    path = os.path.join(cfg.out_dir, filename)
    save_weights(model, path)
    return [path]


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_RUNNERS = {
    "fidelity": run_fidelity,
    "sweep": run_sweep,
    "toy": run_toy,
    "gen": run_gen,
    "cache-audit": run_cache_audit_task,
    "make-model": run_make_model,
}


def run_task(task: str, cfg: RunConfig) -> list[str]:
    """Run one task; returns the report paths written."""
    if task not in _RUNNERS:
        raise ConfigError(f"unknown task {task!r}")
    if cfg.task is not None and cfg.task != task:
        raise ConfigError(f"config names task {cfg.task!r} but {task!r} "
                          "was requested")
    os.makedirs(cfg.out_dir, exist_ok=True)
    return _RUNNERS[task](cfg)
