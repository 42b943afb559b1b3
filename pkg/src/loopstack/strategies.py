"""Iteration strategies for re-applying a layer window at inference.

Every strategy consumes evaluations of the window operator g and emits a
final state.  Writing F(x) = g(x) - x for the window's residual field,
the plain loop x <- g(x) is a unit-step forward-Euler pass on dx/dt = F,
and most strategies below are alternative discretizations of that flow
(damped sub-steps, explicit Runge-Kutta, an anchored RK family) or
classic fixed-point accelerators (heavy-ball, Anderson, Aitken) plus two
stabilized variants (norm rescaling, polynomial blending of iterates).

Evaluation counts per strategy (exact, enforced by tests):

    naive K | euler K | euler_sched len(alphas) | rk s*steps |
    rk_anchored K | heavy_ball K | anderson K | aitken K (2 per
    delta-squared step) | uniform K | norm_stab K | poly_blend K

Degenerate parameter choices reproduce their parents bitwise: heavy_ball
beta=0 follows Euler's exact arithmetic, rk_anchored beta=1 returns the
anchor evaluation itself and beta=0 the damped-Euler endpoint.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

GEval = Callable[[np.ndarray], np.ndarray]

_AITKEN_FALLBACK_TOL = 1e-8
_ANDERSON_RIDGE = 1e-8


# ---------------------------------------------------------------------------
# Butcher tableaus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ButcherTableau:
    """Explicit RK tableau: a is strictly lower triangular (row i holds the
    i coefficients a_{i,0..i-1}), b the output weights; s = len(b) stages."""
    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(tuple(float(v) for v in row) for row in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        if len(self.a) != len(self.b):
            raise ValueError("tableau must have one a-row per stage")
        for i, row in enumerate(self.a):
            if len(row) != i:
                raise ValueError(f"stage {i} must have exactly {i} coefficients "
                                 "(explicit / strictly lower triangular)")

    @property
    def stages(self) -> int:
        return len(self.b)


EULER_TABLEAU = ButcherTableau(a=((),), b=(1.0,))
MIDPOINT_TABLEAU = ButcherTableau(a=((), (0.5,)), b=(0.0, 1.0))
HEUN_TABLEAU = ButcherTableau(a=((), (1.0,)), b=(0.5, 0.5))
RK4_TABLEAU = ButcherTableau(
    a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
    b=(1 / 6, 1 / 3, 1 / 3, 1 / 6))

NAMED_TABLEAUS = {"euler": EULER_TABLEAU, "midpoint": MIDPOINT_TABLEAU,
                  "heun": HEUN_TABLEAU, "rk4": RK4_TABLEAU}


def anchored_tableau(K: int, beta: float) -> ButcherTableau:
    """K-stage tableau of the anchored family: a_ij = 1/K below the
    diagonal, b_1 = beta + (1-beta)/K and b_i = (1-beta)/K for i >= 2."""
    if K < 1:
        raise ValueError("K must be >= 1")
    a = tuple(tuple(1.0 / K for _ in range(i)) for i in range(K))
    b = (beta + (1.0 - beta) / K,) + tuple((1.0 - beta) / K for _ in range(K - 1))
    return ButcherTableau(a=a, b=b)


# ---------------------------------------------------------------------------
# strategy types
# ---------------------------------------------------------------------------


def _check_k(K: int) -> None:
    if K < 1:
        raise ValueError(f"iteration count K must be >= 1, got {K}")


@dataclass(frozen=True)
class NaiveLoop:
    """x <- g(x), K times."""
    K: int

    def __post_init__(self):
        _check_k(self.K)


@dataclass(frozen=True)
class Euler:
    """Damped sub-steps x <- x + alpha*(g(x) - x); alpha defaults to 1/K."""
    K: int
    alpha: Optional[float] = None

    def __post_init__(self):
        _check_k(self.K)


@dataclass(frozen=True)
class EulerSched:
    """Per-step damping schedule; iteration count is len(alphas)."""
    alphas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.alphas:
            raise ValueError("alphas must be non-empty")


@dataclass(frozen=True)
class RKGeneric:
    """Explicit Runge-Kutta on the residual field, `steps` repetitions of
    step size h."""
    tableau: ButcherTableau
    h: float = 1.0
    steps: int = 1

    def __post_init__(self):
        _check_k(self.steps)


@dataclass(frozen=True)
class RKAnchored:
    """Anchored RK family: returns beta*g(x0) + (1-beta)*F^K(x0) where
    F(x) = x + (1/K)(g(x) - x), using the efficient two-branch form
    (anchor pass shared with the first damped sub-step; K passes total)."""
    K: int
    beta: float

    def __post_init__(self):
        _check_k(self.K)


@dataclass(frozen=True)
class HeavyBall:
    """x_{k+1} = x_k + alpha*(g(x_k) - x_k) + beta*(x_k - x_{k-1}),
    with x_{-1} := x_0; alpha defaults to 1/K."""
    K: int
    alpha: Optional[float] = None
    beta: float = 0.0

    def __post_init__(self):
        _check_k(self.K)


@dataclass(frozen=True)
class Anderson:
    """Window-m Anderson acceleration with mixing beta (see anderson_step)."""
    K: int
    m: int = 3
    beta: float = 1.0

    def __post_init__(self):
        _check_k(self.K)
        if self.m < 1:
            raise ValueError("anderson window m must be >= 1")


@dataclass(frozen=True)
class Aitken:
    """Per-coordinate Aitken delta-squared with Steffensen safeguard; each
    step consumes two evaluations, so K must be even."""
    K: int

    def __post_init__(self):
        if self.K % 2 != 0 or self.K < 2:
            raise ValueError("aitken requires even K >= 2 (two evaluations per step)")


@dataclass(frozen=True)
class UniformLoop:
    """x_{k+1} = g(mean(x_0..x_k)) over the iterate running mean."""
    K: int

    def __post_init__(self):
        _check_k(self.K)


@dataclass(frozen=True)
class NormStab:
    """Damped Euler followed by rescaling each token row to the L2 norm it
    had in the loop input; alpha defaults to 1/K."""
    K: int
    alpha: Optional[float] = None

    def __post_init__(self):
        _check_k(self.K)


@dataclass(frozen=True)
class PolyBlend:
    """Convex/affine blend sum_i w_i x_i of the naive-loop iterates
    x_0..x_K; weights has length K+1 and must sum to 1 (+-1e-6)."""
    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) < 1:
            raise ValueError("poly_blend needs at least the x_0 weight")
        if abs(sum(w) - 1.0) > 1e-6:
            raise ValueError(f"poly_blend weights must sum to 1, got {sum(w)}")


Strategy = Union[NaiveLoop, Euler, EulerSched, RKGeneric, RKAnchored, HeavyBall,
                 Anderson, Aitken, UniformLoop, NormStab, PolyBlend]


def strategy_iterations(s: Strategy) -> int:
    """The iteration budget K reported for a strategy (not the pass count)."""
    if isinstance(s, EulerSched):
        return len(s.alphas)
    if isinstance(s, PolyBlend):
        return len(s.weights) - 1
    if isinstance(s, RKGeneric):
        return s.steps
    return s.K


def strategy_passes(s: Strategy) -> int:
    """Exact number of window evaluations the strategy will consume."""
    if isinstance(s, RKGeneric):
        return s.tableau.stages * s.steps
    return strategy_iterations(s)


def strategy_label(s: Strategy) -> str:
    if isinstance(s, RKGeneric):
        for name, tab in NAMED_TABLEAUS.items():
            if tab == s.tableau:
                return name if name != "euler" else "rk_euler"
        return "rk_custom"
    return {NaiveLoop: "naive", Euler: "euler", EulerSched: "euler_sched",
            RKAnchored: "rk_anchored", HeavyBall: "heavy_ball",
            Anderson: "anderson", Aitken: "aitken", UniformLoop: "uniform",
            NormStab: "norm_stab", PolyBlend: "poly_blend"}[type(s)]


# ---------------------------------------------------------------------------
# single steps (exposed for direct testing)
# ---------------------------------------------------------------------------


def rk_step(x: np.ndarray, g: GEval, tableau: ButcherTableau, h: float = 1.0
            ) -> np.ndarray:
    """One explicit RK step of size h on the field F(x) = g(x) - x."""
    stages: list[np.ndarray] = []
    for i in range(tableau.stages):
        xi = x
        for j, aij in enumerate(tableau.a[i]):
            if aij != 0.0:
                xi = xi + (h * aij) * stages[j]
        stages.append(g(xi) - xi)
    out = x
    for bi, ki in zip(tableau.b, stages):
        if bi != 0.0:
            out = out + (h * bi) * ki
    return out


def aitken_step(x: np.ndarray, g_x: np.ndarray, g_g_x: np.ndarray) -> np.ndarray:
    """Per-coordinate Aitken delta-squared update with Steffensen safeguard.

    d1 = g(x) - x, d2 = g(g(x)) - 2 g(x) + x; the accelerated value is
    x - d1^2/d2 with the move clipped to |d1| per coordinate; coordinates
    with |d2| < 1e-8*(1+|d1|) fall back to the plain step x + d1.
    """
    d1 = g_x - x
    d2 = g_g_x - 2.0 * g_x + x
    tiny = np.abs(d2) < _AITKEN_FALLBACK_TOL * (1.0 + np.abs(d1))
    safe_d2 = np.where(tiny, 1.0, d2)
    move = -(d1 * d1) / safe_d2
    move = np.sign(move) * np.minimum(np.abs(move), np.abs(d1))
    return np.where(tiny, x + d1, x + move).astype(x.dtype, copy=False)


@dataclass
class AndersonState:
    """Sliding-window history for Anderson acceleration."""
    m: int
    dx: deque = field(default_factory=deque)  # state increments x_k - x_{k-1}
    df: deque = field(default_factory=deque)  # residual increments f_k - f_{k-1}
    x_prev: Optional[np.ndarray] = None
    f_prev: Optional[np.ndarray] = None

    def push(self, x: np.ndarray, f: np.ndarray) -> None:
        if self.x_prev is not None:
            self.dx.append(x - self.x_prev)
            self.df.append(f - self.f_prev)
            while len(self.dx) > self.m:
                self.dx.popleft()
                self.df.popleft()
        self.x_prev = x
        self.f_prev = f


def anderson_gamma(df_cols: Sequence[np.ndarray], f_k: np.ndarray) -> np.ndarray:
    """Least-squares weights gamma* = argmin ||f_k - dF gamma||_2 via normal
    equations with Tikhonov ridge 1e-8*trace; singular systems give 0."""
    n_cols = len(df_cols)
    dF = np.stack([c.ravel().astype(np.float64) for c in df_cols], axis=1)
    rhs = dF.T @ f_k.ravel().astype(np.float64)
    gram = dF.T @ dF
    ridge = _ANDERSON_RIDGE * np.trace(gram)
    if ridge == 0.0:
        return np.zeros(n_cols)
    try:
        return np.linalg.solve(gram + ridge * np.eye(n_cols), rhs)
    except np.linalg.LinAlgError:
        return np.zeros(n_cols)


def anderson_step(state: AndersonState, x_k: np.ndarray, g_xk: np.ndarray,
                  beta: float) -> np.ndarray:
    """One Anderson update given the fresh evaluation g(x_k).

    With residual f_k = g(x_k) - x_k and histories dX (state increments)
    and dF (residual increments), gamma* minimizes ||f_k - dF gamma||; the
    mixed update combines the extrapolated state and the extrapolated
    g-values (increments dX + dF):

        x_{k+1} = (1-beta)(x_k - dX gamma*) + beta(g(x_k) - (dX+dF) gamma*)

    An empty history (k = 0) degenerates to plain mixing x + beta*f.
    The caller pushes (x_k, f_k) into `state` before invoking this.
    """
    f_k = g_xk - x_k
    if not state.dx:
        return x_k + beta * f_k
    gamma = anderson_gamma(list(state.df), f_k)
    dx_move = sum(gi * ci for gi, ci in zip(gamma, state.dx))
    df_move = sum(gi * ci for gi, ci in zip(gamma, state.df))
    x_bar = x_k - dx_move
    g_bar = g_xk - (dx_move + df_move)
    return ((1.0 - beta) * x_bar + beta * g_bar).astype(x_k.dtype, copy=False)


def _row_norms(x: np.ndarray) -> np.ndarray:
    """L2 norm per token row (last axis); a 1-D state is one row."""
    x64 = x.astype(np.float64, copy=False)
    return np.sqrt(np.sum(x64 * x64, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def apply_strategy(x0: np.ndarray, g: GEval, strategy: Strategy) -> np.ndarray:
    """Run `strategy` from state x0 using window evaluator `g`; returns the
    final state.  Strategy state is fresh per call."""
    x = x0
    if isinstance(strategy, NaiveLoop):
        for _ in range(strategy.K):
            x = g(x)
        return x

    if isinstance(strategy, Euler):
        alpha = strategy.alpha if strategy.alpha is not None else 1.0 / strategy.K
        for _ in range(strategy.K):
            y = g(x)
            x = x + alpha * (y - x)
        return x

    if isinstance(strategy, EulerSched):
        for alpha in strategy.alphas:
            y = g(x)
            x = x + alpha * (y - x)
        return x

    if isinstance(strategy, RKGeneric):
        for _ in range(strategy.steps):
            x = rk_step(x, g, strategy.tableau, strategy.h)
        return x

    if isinstance(strategy, RKAnchored):
        K, beta = strategy.K, strategy.beta
        # the anchor evaluation doubles as the first damped sub-step, so the
        # whole scheme costs exactly K window passes for every beta
        anchor = g(x0)
        alpha = 1.0 / K
        x = x0 + alpha * (anchor - x0)
        for _ in range(K - 1):
            y = g(x)
            x = x + alpha * (y - x)
        if beta == 1.0:
            return anchor
        if beta == 0.0:
            return x
        return beta * anchor + (1.0 - beta) * x

    if isinstance(strategy, HeavyBall):
        alpha = strategy.alpha if strategy.alpha is not None else 1.0 / strategy.K
        beta = strategy.beta
        x_prev = x0
        for _ in range(strategy.K):
            y = g(x)
            if beta != 0.0:
                x_next = x + alpha * (y - x) + beta * (x - x_prev)
            else:
                x_next = x + alpha * (y - x)
            x_prev, x = x, x_next
        return x

    if isinstance(strategy, Anderson):
        state = AndersonState(m=strategy.m)
        for _ in range(strategy.K):
            y = g(x)
            state.push(x, y - x)
            x = anderson_step(state, x, y, strategy.beta)
        return x

    if isinstance(strategy, Aitken):
        for _ in range(strategy.K // 2):
            g1 = g(x)
            g2 = g(g1)
            x = aitken_step(x, g1, g2)
        return x

    if isinstance(strategy, UniformLoop):
        total = x0.astype(np.float64)
        for k in range(1, strategy.K + 1):
            x = g((total / k).astype(x0.dtype, copy=False))
            total += x
        return x

    if isinstance(strategy, NormStab):
        alpha = strategy.alpha if strategy.alpha is not None else 1.0 / strategy.K
        ref = _row_norms(x0)
        for _ in range(strategy.K):
            y = g(x)
            x = x + alpha * (y - x)
            cur = np.maximum(_row_norms(x), 1e-30)
            x = (x.astype(np.float64, copy=False) * (ref / cur)).astype(x0.dtype, copy=False)
        return x

    if isinstance(strategy, PolyBlend):
        acc = None
        for i, w in enumerate(strategy.weights):
            if w != 0.0:
                term = w * x
                acc = term if acc is None else acc + term
            if i < len(strategy.weights) - 1:
                x = g(x)
        assert acc is not None  # weights sum to 1, so at least one is nonzero
        return acc.astype(x0.dtype, copy=False)

    raise TypeError(f"unknown strategy {strategy!r}")


class CountingEvaluator:
    """Wraps an evaluator and counts calls (forward-pass accounting)."""

    def __init__(self, g: GEval):
        self._g = g
        self.count = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.count += 1
        return self._g(x)
