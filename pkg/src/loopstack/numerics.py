"""Deterministic numerical kernels and a portable seeded PRNG.

Conventions
-----------
Matrices are 2-D C-order numpy arrays.  Transformer state is float32;
the toy lab uses float64.  Every reduction (dot products, norms, softmax
sums) accumulates in float64 regardless of the storage dtype, then the
result is cast back to the input dtype.  This keeps 32-bit pipelines
accurate enough for the 1e-5 identity gates while storage stays compact.

All kernels are pure functions of their inputs and run in a fixed
reduction order, so repeated calls are bit-identical.  The module-level
deterministic flag does not change kernel arithmetic; it is consulted by
the harness to suppress nondeterministic report fields (wall times).
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError

# max |activation| beyond which an iterate is declared divergent
DIVERGENCE_LIMIT = 1e6

_DETERMINISTIC = False


def set_deterministic(flag: bool) -> None:
    """Set the global deterministic-mode flag (see module docstring)."""
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


def deterministic_mode() -> bool:
    return _DETERMINISTIC


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation.

    Inputs of any float dtype are promoted to float64 for the product and
    the result is cast back to the wider of the two input dtypes.
    """
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype)
    prod = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return prod.astype(out_dtype, copy=False)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Root-mean-square normalization over the last axis.

    y_j = gain_j * x_j / sqrt(mean_j(x_j^2) + eps), mean in float64.
    """
    x64 = x.astype(np.float64, copy=False)
    ms = np.mean(x64 * x64, axis=-1, keepdims=True)
    y = gain.astype(np.float64, copy=False) * x64 / np.sqrt(ms + eps)
    return y.astype(x.dtype, copy=False)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax with float64 accumulation along `axis`.

    Rows of all -inf (fully masked) would produce NaN; callers must mask
    so that at least one finite entry remains per row.
    """
    x64 = x.astype(np.float64, copy=False)
    shifted = x64 - np.max(x64, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return out.astype(x.dtype, copy=False)


def silu(x: np.ndarray) -> np.ndarray:
    """SiLU activation x * sigmoid(x), computed in float64."""
    x64 = x.astype(np.float64, copy=False)
    return (x64 / (1.0 + np.exp(-x64))).astype(x.dtype, copy=False)


def rope_rotate(x: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotary position embedding at a single position.

    Rotates each consecutive pair (x[..., 2j], x[..., 2j+1]) by the angle
    position * theta_j with theta_j = base**(-2j / head_dim).  Works on any
    array whose last axis is the (even) head dimension; every row gets the
    same position.  position 0 is the identity.
    """
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    if position == 0:
        return x
    angles = position * _rope_thetas(head_dim, base)
    return _rotate_pairs(x, angles)


def rope_rotate_rows(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Vectorized RoPE where axis 0 indexes tokens at distinct positions.

    x has shape (T, ..., head_dim); positions has shape (T,).
    """
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    thetas = _rope_thetas(head_dim, base)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * thetas[None, :]
    # broadcast angle rows over any middle axes (e.g. heads)
    shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (head_dim // 2,)
    return _rotate_pairs(x, angles.reshape(shape))


def _rope_thetas(head_dim: int, base: float) -> np.ndarray:
    j = np.arange(head_dim // 2, dtype=np.float64)
    return float(base) ** (-2.0 * j / head_dim)


def _rotate_pairs(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64, copy=False)
    even = x64[..., 0::2]
    odd = x64[..., 1::2]
    c = np.cos(angles)
    s = np.sin(angles)
    out = np.empty_like(x64)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out.astype(x.dtype, copy=False)


def ensure_finite(x: np.ndarray, what: str = "activations",
                  limit: float = DIVERGENCE_LIMIT) -> np.ndarray:
    """Raise DivergenceError if `x` has non-finite entries or exceeds `limit`."""
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what}")
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > limit:
        raise DivergenceError(f"{what} exceeded divergence limit: {peak:.3e} > {limit:.0e}")
    return x


def is_divergent(x: np.ndarray, limit: float = DIVERGENCE_LIMIT) -> bool:
    """True if `x` has non-finite entries or any |entry| > limit."""
    if not np.all(np.isfinite(x)):
        return True
    return bool(x.size) and float(np.max(np.abs(x))) > limit


# ---------------------------------------------------------------------------
# seeded PRNG (splitmix64)
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_SCALE = 1.0 / float(1 << 53)


def _splitmix(z: np.ndarray) -> np.ndarray:
    # 64-bit finalizer; wrapping uint64 arithmetic (overflow intended)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based splitmix64 stream: output k = mix(seed + (k+1)*golden).

    The integer stream is a pure function of (seed, position), identical
    across platforms and runs.  Uniforms take the top 53 bits; normals are
    Box-Muller pairs.  Fill order is row-major.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.position = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            return _splitmix(self.seed + idx * _GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 in [0, 1), shape as requested."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _U64_SCALE
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        """Standard normals (times `std`) via Box-Muller, float64."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] so log never sees zero
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * _U64_SCALE
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * _U64_SCALE
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n] * std
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in [0, high) (top-53-bit scaling, bias < 2^-43 for desk sizes)."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.uniform(shape if shape else (1,))
        out = np.minimum((np.asarray(u) * high).astype(np.int64), high - 1)
        return out.reshape(shape) if shape else int(out[0])

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream derived from (seed, tag)."""
        child = Rng(0)
        with np.errstate(over="ignore"):
            mixed = np.array([tag + 1], dtype=np.uint64) * _MIX1 + self.seed
            child.seed = _splitmix(mixed)[0]
        return child
