"""Figure rendering for the report paths (PNG, non-interactive backend)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .toy import ToyLabResult

_DPI = 120


def _finite(rows: list[dict], key: str) -> list[dict]:
    return [r for r in rows if math.isfinite(r[key])]


def fidelity_figure(rows: list[dict], path: str) -> None:
    """Deviation vs iteration count, one line per strategy family."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    by_label: dict[str, list[dict]] = {}
    for r in rows:
        by_label.setdefault(r["strategy"], []).append(r)
    for label, group in by_label.items():
        pts = sorted(_finite(group, "mean_dev"), key=lambda r: r["K"])
        if not pts:
            continue
        ax.plot([r["K"] for r in pts], [r["mean_dev"] for r in pts],
                marker="o", label=label)
    if any(math.isfinite(r["mean_dev"]) for r in rows):
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    else:
        ax.text(0.5, 0.5, "no finite deviations", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_xlabel("iterations K")
    ax.set_ylabel("mean RMS deviation from reference endpoint")
    ax.set_title("strategy fidelity vs reference integrator")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def sweep_figure(rows: list[dict], path: str) -> None:
    """One marker per sweep cell, grouped by window, divergences crossed."""
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    if not rows:
        ax.text(0.5, 0.5, "empty sweep", ha="center", va="center",
                transform=ax.transAxes)
    else:
        windows = []
        for r in rows:
            w = (r["window_a"], r["window_b"])
            if w not in windows:
                windows.append(w)
        cmap = plt.get_cmap("tab10")
        finite = _finite(rows, "mean_dev")
        floor = min((r["mean_dev"] for r in finite), default=1e-6)
        top = max((r["mean_dev"] for r in finite), default=1.0)
        for i, r in enumerate(rows):
            w = (r["window_a"], r["window_b"])
            color = cmap(windows.index(w) % 10)
            if r["diverged"] or not math.isfinite(r["mean_dev"]):
                ax.plot(i, top * 2, marker="x", color="red", markersize=8)
            else:
                ax.plot(i, r["mean_dev"], marker="o", color=color)
        if finite:
            ax.set_yscale("log")
            ax.set_ylim(floor / 2, top * 4)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([f"{r['strategy']}\nK={r['K']} "
                            f"[{r['window_a']},{r['window_b']}]"
                            for r in rows], fontsize=6, rotation=45,
                           ha="right")
    ax.set_ylabel("mean RMS deviation (x = diverged)")
    ax.set_title("strategy x window sweep")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def toy_figure(res: ToyLabResult, path: str) -> None:
    """Loss landscape with baseline / naive / damped endpoints per K."""
    ks = res.config.ks
    fig, axes = plt.subplots(1, 1 + len(ks),
                             figsize=(3.4 * (1 + len(ks)), 3.6),
                             sharex=True, sharey=True)
    axes = np.atleast_1d(axes)
    extent = (res.bounds[0], res.bounds[1], res.bounds[2], res.bounds[3])
    img = np.log10(res.grid + 1e-12)
    base = res.endpoints[("baseline", 1)]

    def panel(ax, title):
        ax.imshow(img, origin="lower", extent=extent, aspect="auto",
                  cmap="viridis")
        ax.set_xlim(extent[0], extent[1])
        ax.set_ylim(extent[2], extent[3])
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("z1")

    panel(axes[0], "baseline endpoints")
    axes[0].plot(base[:, 0], base[:, 1], ".", color="white", markersize=2)
    axes[0].set_ylabel("z2")
    for ax, k in zip(axes[1:], ks):
        panel(ax, f"K={k}: naive (red) vs damped (cyan)")
        naive = res.endpoints[("naive", k)]
        sub = res.endpoints[("substep", k)]
        ax.plot(naive[:, 0], naive[:, 1], ".", color="red", markersize=2)
        ax.plot(sub[:, 0], sub[:, 1], ".", color="cyan", markersize=2)
    fig.suptitle("bottleneck loss landscape (log10 median test loss)",
                 fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
