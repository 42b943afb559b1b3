"""Training-free looped-transformer runtime.

Re-applies a contiguous window of a decoder stack at inference time and
treats the loop as numerical integration of the window's residual field,
with pluggable update strategies (damped Euler, Runge-Kutta, momentum,
Anderson mixing, ...), KV-cache bookkeeping for looped decoding, and a
small ODE lab that reproduces the valley-tracking picture in 2-D.
"""

from .errors import (AuditError, ConfigError, DivergenceError, LoopstackError,
                     WeightFormatError)
from .loop import (DecodeMode, LoopConfig, LoopWindow, default_window,
                   layer_operator, looped_forward, residual_field, run_window,
                   window_operator)
from .model import (KVCache, LayerWeights, MoEConfig, Model, ModelConfig,
                    RoutingRecord, block_forward, embed_tokens, lm_head,
                    model_forward, moe_mlp, random_model)
from .numerics import Rng, set_deterministic
from .strategies import (Aitken, Anderson, ButcherTableau, CountingEvaluator,
                         EULER_TABLEAU, Euler, EulerSched, HEUN_TABLEAU,
                         HeavyBall, MIDPOINT_TABLEAU, NAMED_TABLEAUS,
                         NaiveLoop, NormStab, PolyBlend, RK4_TABLEAU,
                         RKAnchored, RKGeneric, Strategy, UniformLoop,
                         anchored_tableau, apply_strategy, strategy_iterations,
                         strategy_label, strategy_passes)
from .decode import (AuditReport, GenResult, Sampler, audit_events, generate,
                     prefill, run_cache_audit)
from .weights_io import load_weights, save_weights
from .toy import ToyConfig, ToyLabResult, run_lab

__version__ = "0.1.0"

__all__ = [
    "AuditError", "AuditReport", "Aitken", "Anderson", "ButcherTableau",
    "ConfigError", "CountingEvaluator", "DecodeMode", "DivergenceError",
    "EULER_TABLEAU", "Euler", "EulerSched", "GenResult", "HEUN_TABLEAU",
    "HeavyBall", "KVCache", "LayerWeights", "LoopConfig", "LoopWindow",
    "LoopstackError", "MIDPOINT_TABLEAU", "MoEConfig", "Model", "ModelConfig",
    "NAMED_TABLEAUS", "NaiveLoop", "NormStab", "PolyBlend", "RK4_TABLEAU",
    "RKAnchored", "RKGeneric", "Rng", "RoutingRecord", "Sampler", "Strategy",
    "ToyConfig", "ToyLabResult", "UniformLoop", "WeightFormatError",
    "anchored_tableau", "apply_strategy", "audit_events", "block_forward",
    "default_window", "embed_tokens", "generate", "layer_operator",
    "lm_head", "load_weights", "looped_forward", "model_forward", "moe_mlp",
    "prefill", "random_model", "residual_field", "run_cache_audit",
    "run_lab", "run_window", "save_weights", "set_deterministic",
    "strategy_iterations", "strategy_label", "strategy_passes",
    "window_operator",
]
