"""PNG figures written next to the tabular artifacts.

Figures use the non-interactive Agg backend and strip the PNG software tag, so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .artifacts import atomic_write_bytes  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def accuracy_curves(series: dict, path, *, target: float | None = None, title: str = "") -> Path:
    """``series`` maps a legend label to (k values, accuracies)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, (ks, acc) in series.items():
        ax.plot(ks, acc, label=label, linewidth=1.2)
    if target is not None:
        ax.axhline(target, color="grey", linestyle=":", linewidth=1.0, label=f"target {target:.3f}")
    ax.set_xlabel("aggregation k")
    ax.set_ylabel("test accuracy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(series: dict, path, *, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, (ks, loss) in series.items():
        ax.plot(ks, loss, label=label, linewidth=1.2)
    ax.set_xlabel("aggregation k")
    ax.set_ylabel("global loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def psi_by_k(ks, psis, eps, path) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(ks, psis, label="psi(alpha, k)")
    ax.plot(range(len(eps)), eps, label="epsilon^(k)", linestyle="--")
    ax.set_xlabel("period k")
    ax.set_ylabel("bound")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def psi_inf_curve(alphas, values, path, *, optimum: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(alphas, values)
    if optimum is not None:
        ax.axvline(optimum, color="tab:red", linestyle=":", label=f"optimal alpha {optimum:.4f}")
        ax.legend()
    ax.set_xlabel("alpha")
    ax.set_ylabel("psi(alpha, inf)")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    return _save(fig, path)
