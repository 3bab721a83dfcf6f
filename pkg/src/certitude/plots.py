"""Figure rendering for CLI reports; PNG files written next to the CSVs."""

from __future__ import annotations

import sys


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        return plt
    except Exception as e:  # matplotlib missing or backend failure
        print(f"warning: figure skipped ({e})", file=sys.stderr)
        return None


def training_curves(metrics, path: str) -> bool:
    """Loss and error curves per epoch from EpochMetrics rows."""
    plt = _pyplot()
    if plt is None or not metrics:
        return False
    epochs = [m.epoch for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(epochs, [m.train_loss for m in metrics], label="train objective")
    ax1.plot(epochs, [m.natural_ce for m in metrics], label="natural CE")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [m.test_standard_error for m in metrics], label="standard error")
    ax2.plot(epochs, [m.test_verified_error for m in metrics], label="verified error")
    ax2b = ax2.twinx()
    ax2b.plot(epochs, [m.eps for m in metrics], color="gray", ls="--", lw=0.8, label="eps")
    ax2b.set_ylabel("eps")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("error")
    ax2.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def margin_histogram(min_margins, verified, path: str) -> bool:
    """Distribution of per-example worst margins, split by verification."""
    plt = _pyplot()
    if plt is None:
        return False
    import numpy as np

    min_margins = np.asarray(min_margins)
    verified = np.asarray(verified, dtype=bool)
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    bins = np.histogram_bin_edges(min_margins, bins=40)
    ax.hist(min_margins[verified], bins=bins, alpha=0.7, label="verified")
    ax.hist(min_margins[~verified], bins=bins, alpha=0.7, label="not verified")
    ax.axvline(0.0, color="k", lw=0.8)
    ax.set_xlabel("worst margin lower bound")
    ax.set_ylabel("examples")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def bounds_vs_eps(rows, path: str) -> bool:
    """Mean worst-margin per method across the eps grid.

    ``rows`` are (example, eps, method, min_margin) tuples.
    """
    plt = _pyplot()
    if plt is None or not rows:
        return False
    import numpy as np

    methods = sorted({r[2] for r in rows})
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for method in methods:
        pts = sorted({r[1] for r in rows if r[2] == method})
        means = [np.mean([r[3] for r in rows if r[2] == method and r[1] == e]) for e in pts]
        ax.plot(pts, means, marker="o", label=method)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("eps")
    ax.set_ylabel("mean worst margin bound")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def schedule_study(rows, path: str) -> bool:
    """Best/median/worst verified error vs ramp length, one line per method.

    ``rows`` are (method, ramp_epochs, best, median, worst) tuples.
    """
    plt = _pyplot()
    if plt is None or not rows:
        return False
    methods = sorted({r[0] for r in rows})
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for method in methods:
        sub = sorted((r for r in rows if r[0] == method), key=lambda r: r[1])
        ramps = [r[1] for r in sub]
        med = [r[3] for r in sub]
        low = [r[3] - r[2] for r in sub]
        high = [r[4] - r[3] for r in sub]
        ax.errorbar(ramps, med, yerr=[low, high], marker="o", capsize=3, label=method)
    ax.set_xlabel("ramp length (epochs)")
    ax.set_ylabel("verified error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True
