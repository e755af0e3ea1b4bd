"""Figure rendering for the report path (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_log2_histogram(log2_ratios: np.ndarray, path: Path | str, bins: int = 40) -> None:
    """Histogram of log2(|error| / bound); mass above zero means bound misses."""
    vals = np.asarray(log2_ratios, dtype=float)
    vals = vals[np.isfinite(vals)]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if vals.size:
        ax.hist(vals, bins=bins, color="tab:blue", alpha=0.8)
    ax.axvline(0.0, color="black", linestyle="--", linewidth=1)
    ax.set_xlabel("log2(|error| / bound)")
    ax.set_ylabel("count")
    ax.set_title("Realized error vs pointwise bound")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_d2n_band(
    model,
    edge: int,
    path: Path | str,
    delta: float = 0.05,
    test_inputs: np.ndarray | None = None,
    test_predictions: np.ndarray | None = None,
    test_truth: np.ndarray | None = None,
    grid_points: int = 200,
) -> bool:
    """Edge-wise input -> flux map with its confidence band (1-D encodings only).

    Training points in red, test predictions/targets overlaid when given.
    Returns False (and renders nothing) for 2-D endpoint encodings.
    """
    from .inference import error_bounds, predict_edge

    em = model.edges[edge]
    x_train = np.atleast_2d(em.training_inputs)
    if x_train.shape[1] != 1:
        return False
    lo = float(x_train.min())
    hi = float(x_train.max())
    pad = 0.25 * max(hi - lo, 1e-12)
    grid = np.linspace(lo - pad, hi + pad, grid_points)
    means = np.empty(grid_points)
    bounds = np.empty(grid_points)
    for i, x in enumerate(grid):
        means[i], _ = predict_edge(model, edge, [x])
        bounds[i] = error_bounds(model, edge, [x], delta).pointwise_bound

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.fill_between(
        grid, means - bounds, means + bounds,
        color="pink", alpha=0.6, label=f"pointwise bound (delta={delta:g})",
    )
    ax.plot(grid, means, color="firebrick", linewidth=1.5, label="posterior mean")
    ax.scatter(
        x_train[:, 0], em.training_targets, color="red", zorder=5,
        marker="o", s=30, label="training data",
    )
    if test_inputs is not None and test_predictions is not None:
        ax.scatter(
            np.ravel(test_inputs), np.ravel(test_predictions),
            color="purple", marker="s", s=18, label="test predictions",
        )
    if test_inputs is not None and test_truth is not None:
        ax.scatter(
            np.ravel(test_inputs), np.ravel(test_truth),
            color="tab:blue", marker="x", s=18, label="test targets",
        )
    ax.set_xlabel("encoded edge input")
    ax.set_ylabel("flux")
    ax.set_title(f"Edge {edge}: learned flux map")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def render_bench(points, exponent: float, path: Path | str) -> None:
    """Log-log per-epoch time vs training-sample count with the fitted slope."""
    ns = np.array([p.n_data for p in points], dtype=float)
    ts = np.array([p.seconds_per_epoch for p in points], dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.loglog(ns, ts, "o-", color="tab:blue", label="measured")
    ref = ts[0] * (ns / ns[0]) ** 2
    ax.loglog(ns, ref, "--", color="gray", label="quadratic reference")
    ax.set_xlabel("training samples")
    ax.set_ylabel("seconds per epoch")
    ax.set_title(f"Per-epoch scaling (fitted exponent {exponent:.2f})")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
