"""Run configuration: one JSON document per CLI invocation.

Top-level keys (all sections reject unknown keys):

    task           optional; must match the subcommand when present
    model          {"path": ...} or {"synthetic": {<model config>, "seed": n}}
    loop           window/mode/strategy/cache/decode for single-strategy tasks
    fidelity       {"strategies": [...], "n_probes": n, "prompt_len": n}
    sweep          {"strategies": [...], "windows": [[a,b]...], ...}
    toy            toy-lab overrides (seed, steps, ks, resolution, bounds, ...)
    gen            {"prompt": [...] | {"random_len": n}, "max_new": n, "sampler": {...}}
    cache_audit    {"prompt_len": n, "max_new": n}
    make_model     {"filename": "model.tflt"}
    seed           run seed  (overridden by --seed)
    deterministic  bool      (overridden by --deterministic)
    out_dir        report directory (overridden by --out)

Strategy specs are {"type": <name>, ...params}; window is [a, b], the
string "default", or {"fraction": f, "width": w} for the depth-fraction
placement rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import ConfigError, WeightFormatError
from .loop import (DEFAULT_WINDOW_FRACTION, DEFAULT_WINDOW_WIDTH, DecodeMode,
                   LoopConfig, LoopWindow, default_window)
from .model import ModelConfig
from .strategies import (Aitken, Anderson, ButcherTableau, Euler, EulerSched,
                         HeavyBall, NaiveLoop, NAMED_TABLEAUS, NormStab,
                         PolyBlend, RKAnchored, RKGeneric, Strategy,
                         UniformLoop)
from .weights_io import config_from_dict

TASKS = ("fidelity", "sweep", "toy", "gen", "cache-audit", "make-model")


def _check_keys(section: str, d: dict, known: set[str],
                required: set[str] = frozenset()) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be an object")
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{section}: missing required keys {sorted(missing)}")


def parse_strategy(spec: Any, where: str = "strategy") -> Strategy:
    """Strategy spec dict -> strategy object, with strict validation."""
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError(f"{where}: expected an object with a 'type' key")
    kind = spec["type"]
    params = {k: v for k, v in spec.items() if k != "type"}
    try:
        if kind == "naive":
            _check_keys(where, params, {"K"}, {"K"})
            return NaiveLoop(K=int(params["K"]))
        if kind == "euler":
            _check_keys(where, params, {"K", "alpha"}, {"K"})
            alpha = params.get("alpha")
            return Euler(K=int(params["K"]),
                         alpha=None if alpha is None else float(alpha))
        if kind == "euler_sched":
            _check_keys(where, params, {"alphas"}, {"alphas"})
            return EulerSched(alphas=tuple(float(a) for a in params["alphas"]))
        if kind == "rk":
            _check_keys(where, params, {"tableau", "h", "steps"}, {"tableau"})
            tab = params["tableau"]
            if isinstance(tab, str):
                if tab not in NAMED_TABLEAUS:
                    raise ConfigError(f"{where}: unknown tableau {tab!r} "
                                      f"(known: {sorted(NAMED_TABLEAUS)})")
                tableau = NAMED_TABLEAUS[tab]
            else:
                _check_keys(f"{where}.tableau", tab, {"a", "b"}, {"a", "b"})
                tableau = ButcherTableau(a=tuple(tuple(r) for r in tab["a"]),
                                         b=tuple(tab["b"]))
            return RKGeneric(tableau=tableau, h=float(params.get("h", 1.0)),
                             steps=int(params.get("steps", 1)))
        if kind == "rk_anchored":
            _check_keys(where, params, {"K", "beta"}, {"K", "beta"})
            return RKAnchored(K=int(params["K"]), beta=float(params["beta"]))
        if kind == "heavy_ball":
            _check_keys(where, params, {"K", "alpha", "beta"}, {"K"})
            alpha = params.get("alpha")
            return HeavyBall(K=int(params["K"]),
                             alpha=None if alpha is None else float(alpha),
                             beta=float(params.get("beta", 0.0)))
        if kind == "anderson":
            _check_keys(where, params, {"K", "m", "beta"}, {"K"})
            return Anderson(K=int(params["K"]), m=int(params.get("m", 3)),
                            beta=float(params.get("beta", 1.0)))
        if kind == "aitken":
            _check_keys(where, params, {"K"}, {"K"})
            return Aitken(K=int(params["K"]))
        if kind == "uniform":
            _check_keys(where, params, {"K"}, {"K"})
            return UniformLoop(K=int(params["K"]))
        if kind == "norm_stab":
            _check_keys(where, params, {"K", "alpha"}, {"K"})
            alpha = params.get("alpha")
            return NormStab(K=int(params["K"]),
                            alpha=None if alpha is None else float(alpha))
        if kind == "poly_blend":
            _check_keys(where, params, {"weights"}, {"weights"})
            return PolyBlend(weights=tuple(float(w) for w in params["weights"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unknown strategy type {kind!r}")


def parse_window(spec: Any, n_layers: int, where: str = "loop.window") -> LoopWindow:
    if spec is None or spec == "default":
        return default_window(n_layers)
    if isinstance(spec, dict):
        _check_keys(where, spec, {"fraction", "width"})
        try:
            return default_window(n_layers,
                                  width=int(spec.get("width", DEFAULT_WINDOW_WIDTH)),
                                  fraction=float(spec.get("fraction",
                                                          DEFAULT_WINDOW_FRACTION)))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    if isinstance(spec, (list, tuple)) and len(spec) == 2:
        try:
            w = LoopWindow(int(spec[0]), int(spec[1]))
            w.validate_for(n_layers)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        return w
    raise ConfigError(f"{where}: expected [a, b], \"default\" or "
                      "{fraction, width}")


def parse_decode_mode(spec: Any, where: str = "loop.decode") -> DecodeMode:
    if spec is None:
        return DecodeMode("bypass")
    if isinstance(spec, str):
        if spec not in ("bypass", "full"):
            raise ConfigError(f"{where}: unknown decode mode {spec!r}")
        return DecodeMode(spec)
    if isinstance(spec, dict):
        _check_keys(where, spec, {"first_n"}, {"first_n"})
        try:
            return DecodeMode("first_n", n=int(spec["first_n"]))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: expected \"bypass\", \"full\" or {{\"first_n\": n}}")


@dataclass
class ModelSource:
    path: Optional[str] = None
    synthetic: Optional[ModelConfig] = None
    seed: int = 0


@dataclass
class GenSpec:
    prompt: Optional[list[int]] = None
    random_len: int = 8
    max_new: int = 16
    sampler_kind: str = "greedy"
    temperature: float = 1.0


@dataclass
class RunConfig:
    task: Optional[str] = None
    model: Optional[ModelSource] = None
    loop_raw: Optional[dict] = None
    fidelity: Optional[dict] = None
    sweep: Optional[dict] = None
    toy: Optional[dict] = None
    gen: Optional[GenSpec] = None
    cache_audit: dict = field(default_factory=dict)
    make_model: dict = field(default_factory=dict)
    seed: int = 0
    deterministic: bool = False
    out_dir: str = "."

    def loop_config(self, n_layers: int, strategy: Optional[Strategy] = None
                    ) -> LoopConfig:
        """Resolve the loop section against a concrete layer count."""
        raw = self.loop_raw or {}
        if strategy is None:
            if "strategy" not in raw:
                raise ConfigError("loop.strategy is required for this task")
            strategy = parse_strategy(raw["strategy"], "loop.strategy")
        try:
            return LoopConfig(
                window=parse_window(raw.get("window"), n_layers),
                strategy=strategy,
                mode=raw.get("mode", "block"),
                cache_strategy=raw.get("cache", "last"),
                decode_mode=parse_decode_mode(raw.get("decode")),
            )
        except ValueError as exc:
            raise ConfigError(f"loop: {exc}") from exc


def _parse_model(d: dict) -> ModelSource:
    _check_keys("model", d, {"path", "synthetic"})
    if ("path" in d) == ("synthetic" in d):
        raise ConfigError("model: exactly one of 'path' or 'synthetic' required")
    if "path" in d:
        if not isinstance(d["path"], str):
            raise ConfigError("model.path must be a string")
        return ModelSource(path=d["path"])
    syn = dict(d["synthetic"])
    if not isinstance(syn, dict):
        raise ConfigError("model.synthetic must be an object")
    seed = syn.pop("seed", 0)
    try:
        cfg = config_from_dict(syn)
    except WeightFormatError as exc:
        raise ConfigError(f"model.synthetic: {exc}") from exc
    return ModelSource(synthetic=cfg, seed=int(seed))


def _parse_gen(d: dict) -> GenSpec:
    _check_keys("gen", d, {"prompt", "max_new", "sampler"})
    spec = GenSpec()
    prompt = d.get("prompt")
    if isinstance(prompt, list):
        spec.prompt = [int(t) for t in prompt]
    elif isinstance(prompt, dict):
        _check_keys("gen.prompt", prompt, {"random_len"}, {"random_len"})
        spec.random_len = int(prompt["random_len"])
    elif prompt is not None:
        raise ConfigError("gen.prompt must be a token list or {random_len}")
    spec.max_new = int(d.get("max_new", 16))
    if spec.max_new < 0:
        raise ConfigError("gen.max_new must be >= 0")
    sampler = d.get("sampler", {"kind": "greedy"})
    _check_keys("gen.sampler", sampler, {"kind", "temperature"}, {"kind"})
    spec.sampler_kind = sampler["kind"]
    if spec.sampler_kind not in ("greedy", "temperature"):
        raise ConfigError(f"gen.sampler: unknown kind {spec.sampler_kind!r}")
    spec.temperature = float(sampler.get("temperature", 1.0))
    if spec.sampler_kind == "temperature" and spec.temperature <= 0:
        raise ConfigError("gen.sampler: temperature must be positive")
    return spec


_TOP_KEYS = {"task", "model", "loop", "fidelity", "sweep", "toy", "gen",
             "cache_audit", "make_model", "seed", "deterministic", "out_dir"}
_LOOP_KEYS = {"window", "mode", "strategy", "cache", "decode"}
_FIDELITY_KEYS = {"strategies", "n_probes", "prompt_len"}
_SWEEP_KEYS = {"strategies", "windows", "n_probes", "prompt_len"}
_TOY_KEYS = {"seed", "steps", "n_train", "n_test", "noise", "ks",
             "resolution", "bounds"}
_AUDIT_KEYS = {"prompt_len", "max_new"}


def parse_run_config(doc: Any) -> RunConfig:
    _check_keys("config", doc, _TOP_KEYS)
    cfg = RunConfig()
    if "task" in doc:
        if doc["task"] not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {doc['task']!r}")
        cfg.task = doc["task"]
    if "model" in doc:
        cfg.model = _parse_model(doc["model"])
    if "loop" in doc:
        _check_keys("loop", doc["loop"], _LOOP_KEYS)
        cfg.loop_raw = doc["loop"]
    if "fidelity" in doc:
        _check_keys("fidelity", doc["fidelity"], _FIDELITY_KEYS, {"strategies"})
        cfg.fidelity = doc["fidelity"]
    if "sweep" in doc:
        _check_keys("sweep", doc["sweep"], _SWEEP_KEYS, {"strategies", "windows"})
        cfg.sweep = doc["sweep"]
    if "toy" in doc:
        _check_keys("toy", doc["toy"], _TOY_KEYS)
        cfg.toy = doc["toy"]
    if "gen" in doc:
        cfg.gen = _parse_gen(doc["gen"])
    if "cache_audit" in doc:
        _check_keys("cache_audit", doc["cache_audit"], _AUDIT_KEYS)
        cfg.cache_audit = doc["cache_audit"]
    if "make_model" in doc:
        _check_keys("make_model", doc["make_model"], {"filename"})
        cfg.make_model = doc["make_model"]
    if "seed" in doc:
        cfg.seed = int(doc["seed"])
    if "deterministic" in doc:
        if not isinstance(doc["deterministic"], bool):
            raise ConfigError("deterministic must be a boolean")
        cfg.deterministic = doc["deterministic"]
    if "out_dir" in doc:
        cfg.out_dir = str(doc["out_dir"])
    return cfg


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)
