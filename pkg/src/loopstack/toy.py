"""Desk-scale residual-network lab for visualizing looped evaluation.

A small float64 regression net with an explicit bottleneck:

    pre:  R^4 -> R^2, affine + tanh
    bottleneck: three residual blocks z + W2 tanh(z W1 + b1) + b2  (R^2)
    post: R^2 -> R^2, affine

trained by full-batch gradient descent with hand-written gradients on
the task y = (sin(w1.x), tanh(w2.x)) + noise.  Because the bottleneck
lives in R^2, re-applying it K times (naive) versus taking K damped
sub-steps x <- (1-1/K) x + (1/K) B(x) can be plotted directly: the
endpoint scatter of each scheme over the test set, on top of a dense
grid of the loss landscape L(z) = median_i ||post(z) - y_i||^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import Rng

# fixed task projections for y = (sin(w1.x), tanh(w2.x))
TASK_W1 = np.array([0.9, -0.6, 0.3, 0.2])
TASK_W2 = np.array([-0.3, 0.8, -0.5, 0.7])


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 7
    n_train: int = 2048
    n_test: int = 512
    noise: float = 0.05
    hidden: int = 16
    n_blocks: int = 3
    lr: float = 1e-2
    steps: int = 5000
    ks: tuple[int, ...] = (2, 4, 8)
    resolution: int = 220
    bounds: Optional[tuple[float, float, float, float]] = None  # z1min,z1max,z2min,z2max


@dataclass
class ToyNet:
    pre_w: np.ndarray   # (4, 2)
    pre_b: np.ndarray   # (2,)
    blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]  # w1,b1,w2,b2
    post_w: np.ndarray  # (2, 2)
    post_b: np.ndarray  # (2,)

    def params(self) -> list[np.ndarray]:
        out = [self.pre_w, self.pre_b]
        for w1, b1, w2, b2 in self.blocks:
            out += [w1, b1, w2, b2]
        out += [self.post_w, self.post_b]
        return out


def init_net(config: ToyConfig, rng: Rng) -> ToyNet:
    def mat(r, c, std):
        return rng.normal((r, c), std=std)

    h = config.hidden
    blocks = [(mat(2, h, 1.0 / np.sqrt(2)), np.zeros(h),
               mat(h, 2, 1.0 / np.sqrt(h)), np.zeros(2))
              for _ in range(config.n_blocks)]
    # the post head starts small so the bottleneck carries the output scale
    return ToyNet(pre_w=mat(4, 2, 0.5), pre_b=np.zeros(2), blocks=blocks,
                  post_w=mat(2, 2, 0.3), post_b=np.zeros(2))


def make_dataset(config: ToyConfig, rng: Rng) -> tuple[np.ndarray, ...]:
    def split(n):
        x = rng.normal((n, 4))
        y = np.stack([np.sin(x @ TASK_W1), np.tanh(x @ TASK_W2)], axis=1)
        return x, y + rng.normal((n, 2), std=config.noise)

    xtr, ytr = split(config.n_train)
    xte, yte = split(config.n_test)
    return xtr, ytr, xte, yte


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def pre_forward(net: ToyNet, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ net.pre_w + net.pre_b)


def block_apply(net: ToyNet, i: int, z: np.ndarray) -> np.ndarray:
    w1, b1, w2, b2 = net.blocks[i]
    return z + np.tanh(z @ w1 + b1) @ w2 + b2


def bottleneck(net: ToyNet, z: np.ndarray) -> np.ndarray:
    """One pass through the three residual blocks (the looped operator B)."""
    for i in range(len(net.blocks)):
        z = block_apply(net, i, z)
    return z


def post_forward(net: ToyNet, z: np.ndarray) -> np.ndarray:
    return z @ net.post_w + net.post_b


def net_forward(net: ToyNet, x: np.ndarray) -> np.ndarray:
    return post_forward(net, bottleneck(net, pre_forward(net, x)))


def mse(yhat: np.ndarray, y: np.ndarray) -> float:
    """Mean over samples of the squared error summed over the 2 outputs."""
    d = yhat - y
    return float(np.mean(np.sum(d * d, axis=1)))


def loss_and_grads(net: ToyNet, x: np.ndarray, y: np.ndarray
                   ) -> tuple[float, list[np.ndarray]]:
    """Full forward plus hand-written reverse pass; gradients are returned
    in the order of net.params()."""
    n = x.shape[0]
    z0 = np.tanh(x @ net.pre_w + net.pre_b)
    zs = [z0]
    hs = []
    z = z0
    for w1, b1, w2, b2 in net.blocks:
        h = np.tanh(z @ w1 + b1)
        hs.append(h)
        z = z + h @ w2 + b2
        zs.append(z)
    yhat = z @ net.post_w + net.post_b
    diff = yhat - y
    loss = float(np.mean(np.sum(diff * diff, axis=1)))

    dyhat = 2.0 * diff / n
    d_post_w = zs[-1].T @ dyhat
    d_post_b = dyhat.sum(axis=0)
    dz = dyhat @ net.post_w.T
    block_grads = []
    for i in reversed(range(len(net.blocks))):
        w1, b1, w2, b2 = net.blocks[i]
        h = hs[i]
        z_in = zs[i]
        d_b2 = dz.sum(axis=0)
        d_w2 = h.T @ dz
        dh = dz @ w2.T
        da = dh * (1.0 - h * h)
        d_w1 = z_in.T @ da
        d_b1 = da.sum(axis=0)
        dz = dz + da @ w1.T
        block_grads.append([d_w1, d_b1, d_w2, d_b2])
    da0 = dz * (1.0 - z0 * z0)
    d_pre_w = x.T @ da0
    d_pre_b = da0.sum(axis=0)

    grads = [d_pre_w, d_pre_b]
    for g4 in reversed(block_grads):
        grads += g4
    grads += [d_post_w, d_post_b]
    return loss, grads


def gradient_check(net: ToyNet, x: np.ndarray, y: np.ndarray,
                   h: float = 1e-6) -> float:
    """Max relative error of the manual gradients against central finite
    differences over every parameter entry."""
    _, grads = loss_and_grads(net, x, y)
    params = net.params()
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = mse(net_forward(net, x), y)
            flat[j] = orig - h
            lm = mse(net_forward(net, x), y)
            flat[j] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(gflat[j] - fd) / (1e-8 + max(abs(gflat[j]), abs(fd)))
            worst = max(worst, rel)
    return worst


def train(config: ToyConfig) -> tuple[ToyNet, dict]:
    """Full-batch GD; returns the net and {losses, data} for downstream use."""
    rng = Rng(config.seed)
    xtr, ytr, xte, yte = make_dataset(config, rng)
    net = init_net(config, rng.spawn(1))
    losses = np.empty(config.steps + 1)
    for step in range(config.steps):
        loss, grads = loss_and_grads(net, xtr, ytr)
        losses[step] = loss
        for p, g in zip(net.params(), grads):
            p -= config.lr * g
    losses[config.steps] = mse(net_forward(net, xtr), ytr)
    return net, {"losses": losses, "xtr": xtr, "ytr": ytr, "xte": xte, "yte": yte}


# ---------------------------------------------------------------------------
# looped evaluation in the bottleneck plane
# ---------------------------------------------------------------------------

EVAL_KINDS = ("baseline", "naive", "substep")


def bottleneck_endpoints(net: ToyNet, x: np.ndarray, kind: str, K: int = 1
                         ) -> np.ndarray:
    """(n, 2) bottleneck states after the chosen evaluation scheme."""
    z = pre_forward(net, x)
    if kind == "baseline":
        return bottleneck(net, z)
    if kind == "naive":
        for _ in range(K):
            z = bottleneck(net, z)
        return z
    if kind == "substep":
        alpha = 1.0 / K
        for _ in range(K):
            z = z + alpha * (bottleneck(net, z) - z)
        return z
    raise ValueError(f"unknown eval kind {kind!r}")


def eval_mse(net: ToyNet, x: np.ndarray, y: np.ndarray, kind: str, K: int = 1
             ) -> float:
    return mse(post_forward(net, bottleneck_endpoints(net, x, kind, K)), y)


def scatter_bounds(endpoint_sets: list[np.ndarray], margin: float = 0.08
                   ) -> tuple[float, float, float, float]:
    """Axis-aligned bounds covering every endpoint set, with relative margin."""
    allz = np.concatenate(endpoint_sets, axis=0)
    lo = allz.min(axis=0)
    hi = allz.max(axis=0)
    pad = np.maximum((hi - lo) * margin, 1e-3)
    lo, hi = lo - pad, hi + pad
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def loss_grid(net: ToyNet, y_test: np.ndarray,
              bounds: tuple[float, float, float, float],
              resolution: int = 220) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Median test loss over a dense bottleneck-plane grid.

    Returns (z1_axis, z2_axis, grid) with grid[i, j] =
    median_i ||post((z1[j], z2[i])) - y_i||^2 (rows follow z2).
    """
    z1min, z1max, z2min, z2max = bounds
    z1 = np.linspace(z1min, z1max, resolution)
    z2 = np.linspace(z2min, z2max, resolution)
    g1, g2 = np.meshgrid(z1, z2)
    cells = np.stack([g1.ravel(), g2.ravel()], axis=1)  # (res*res, 2)
    proj = post_forward(net, cells)
    out = np.empty(cells.shape[0])
    chunk = 8192
    for s in range(0, cells.shape[0], chunk):
        d = proj[s:s + chunk, None, :] - y_test[None, :, :]
        out[s:s + chunk] = np.median(np.sum(d * d, axis=2), axis=1)
    return z1, z2, out.reshape(resolution, resolution)


def cell_loss_at(z1_axis: np.ndarray, z2_axis: np.ndarray, grid: np.ndarray,
                 points: np.ndarray) -> np.ndarray:
    """Grid-cell loss for each (n, 2) point, by nearest cell center; points
    outside the bounds clamp to the border cells."""
    i1 = np.clip(np.searchsorted(z1_axis, points[:, 0]), 1, len(z1_axis) - 1)
    i1 = np.where(np.abs(z1_axis[i1] - points[:, 0])
                  <= np.abs(z1_axis[i1 - 1] - points[:, 0]), i1, i1 - 1)
    i2 = np.clip(np.searchsorted(z2_axis, points[:, 1]), 1, len(z2_axis) - 1)
    i2 = np.where(np.abs(z2_axis[i2] - points[:, 1])
                  <= np.abs(z2_axis[i2 - 1] - points[:, 1]), i2, i2 - 1)
    return grid[i2, i1]


def mean_target_preimage(net: ToyNet, y: np.ndarray) -> np.ndarray:
    """The bottleneck point the affine post head maps onto the mean target."""
    ybar = y.mean(axis=0)
    return np.linalg.solve(net.post_w.T, ybar - net.post_b)


@dataclass
class ToyLabResult:
    config: ToyConfig
    losses: np.ndarray
    mse_table: dict            # (kind, K) -> float; baseline keyed ("baseline", 1)
    endpoints: dict            # (kind, K) -> (n_test, 2)
    bounds: tuple[float, float, float, float]
    z1_axis: np.ndarray = field(repr=False, default=None)
    z2_axis: np.ndarray = field(repr=False, default=None)
    grid: np.ndarray = field(repr=False, default=None)
    preimage: np.ndarray = None
    gradcheck: float = 0.0


def run_lab(config: ToyConfig, gradcheck_samples: int = 32) -> ToyLabResult:
    """Train, evaluate every scheme, and rasterize the loss landscape."""
    net, data = train(config)
    xte, yte = data["xte"], data["yte"]
    gc = gradient_check(net, data["xtr"][:gradcheck_samples],
                        data["ytr"][:gradcheck_samples])

    endpoints = {("baseline", 1): bottleneck_endpoints(net, xte, "baseline")}
    mse_table = {("baseline", 1): eval_mse(net, xte, yte, "baseline")}
    for K in config.ks:
        for kind in ("naive", "substep"):
            endpoints[(kind, K)] = bottleneck_endpoints(net, xte, kind, K)
            mse_table[(kind, K)] = eval_mse(net, xte, yte, kind, K)

    bounds = config.bounds or scatter_bounds(list(endpoints.values()))
    z1, z2, grid = loss_grid(net, yte, bounds, config.resolution)
    return ToyLabResult(config=config, losses=data["losses"],
                        mse_table=mse_table, endpoints=endpoints, bounds=bounds,
                        z1_axis=z1, z2_axis=z2, grid=grid,
                        preimage=mean_target_preimage(net, data["ytr"]),
                        gradcheck=gc)
