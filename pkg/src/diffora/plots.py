"""Figure rendering for the report paths.

Every CLI command that writes delimited output also renders a matching
matplotlib figure next to it: loss curves, the relaxed-selection heatmap
(module families against layers), residual decay curves, and the
strategy-comparison chart.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .adapters import FAMILIES


def save_loss_curves(rows: list[tuple[int, float, float]], path: str,
                     title: str = "training curves") -> None:
    steps = [r[0] for r in rows]
    train = [r[1] for r in rows]
    valid = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, train, label="train", lw=1.5)
    ax.plot(steps, valid, label="valid", lw=1.5, ls="--")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_gamma_heatmap(gamma: np.ndarray, path: str, title: str = "module weights") -> None:
    """Heatmap of the (L x N) selection matrix, families as rows."""
    gamma = np.asarray(gamma, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * gamma.shape[0], 3.2))
    im = ax.imshow(gamma.T, aspect="auto", cmap="viridis", vmin=0.0,
                   vmax=max(1.0, float(gamma.max())))
    ax.set_yticks(range(len(FAMILIES)), FAMILIES)
    ax.set_xticks(range(gamma.shape[0]), [str(i + 1) for i in range(gamma.shape[0])])
    ax.set_xlabel("layer")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_residual_curves(curves: dict[str, list[float]], eta: float, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, res in curves.items():
        t = np.arange(len(res)) * eta
        ax.semilogy(t, res, label=name, lw=1.5)
    ax.set_xlabel("time (step * eta)")
    ax.set_ylabel("squared residual")
    ax.set_title("residual decay")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_compare_chart(rows: list[dict], path: str) -> None:
    """Mean final loss with one-sd whiskers per strategy row."""
    labels = [f"{r['strategy']}" + (f" (rho={r['rho']})" if "rho" in r else "")
              for r in rows]
    means = [r["mean_final_loss"] for r in rows]
    sds = [r.get("sd_final_loss", 0.0) for r in rows]
    fig, ax = plt.subplots(figsize=(1.5 + 1.1 * len(rows), 4))
    ax.bar(range(len(rows)), means, yerr=sds, capsize=4, color="#4878d0")
    ax.set_xticks(range(len(rows)), labels, rotation=20, ha="right")
    ax.set_ylabel("final training loss")
    ax.set_title("selection strategies")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
