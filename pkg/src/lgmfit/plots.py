"""Report figures for fitted models.

Every function renders straight to a PNG file with the Agg backend, so the
command-line report path works on headless machines. Each returns the path
it wrote, or None when there was nothing to draw.
"""

import math
import os
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .marginals import Marginal  # noqa: E402

DPI = 120


def _marginal_panels(margs: Dict[str, Marginal], path, suptitle: str,
                     max_panels: int = 20) -> Optional[str]:
    """Small-multiples figure: one density curve per marginal."""
    names = list(margs)[:max_panels]
    if not names:
        return None
    ncol = min(3, len(names))
    nrow = int(math.ceil(len(names) / ncol))
    fig, axes = plt.subplots(nrow, ncol, squeeze=False,
                             figsize=(4.0 * ncol, 2.8 * nrow))
    for ax, name in zip(axes.flat, names):
        m = margs[name]
        ax.plot(m.x, m.density, lw=1.5)
        ax.fill_between(m.x, m.density, alpha=0.15)
        ax.set_title(name, fontsize=10)
        ax.set_ylim(bottom=0.0)
    for ax in axes.flat[len(names):]:
        ax.set_axis_off()
    fig.suptitle(suptitle)
    fig.tight_layout(rect=(0, 0, 1, 0.96))
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def plot_fixed_marginals(margs: Dict[str, Marginal], path) -> Optional[str]:
    """Posterior densities of the fixed effects."""
    return _marginal_panels(margs, path, "Fixed-effect posterior marginals")


def plot_hyperpar_marginals(margs: Dict[str, Marginal],
                            path) -> Optional[str]:
    """Posterior densities of the hyperparameters, natural scale."""
    return _marginal_panels(margs, path,
                            "Hyperparameter posterior marginals")


def plot_random_effects(summary, path) -> Optional[str]:
    """Posterior mean and 95% interval for every random-effect element."""
    if summary is None or len(summary) == 0:
        return None
    n = len(summary)
    idx = np.arange(n)
    mean = summary["mean"].to_numpy()
    lo = summary["0.025quant"].to_numpy()
    hi = summary["0.975quant"].to_numpy()
    fig, ax = plt.subplots(figsize=(max(6.0, min(0.16 * n, 14.0)), 4.0))
    ax.vlines(idx, lo, hi, color="tab:blue", alpha=0.5, lw=1.2)
    ax.plot(idx, mean, "o", ms=3, color="tab:blue")
    ax.axhline(0.0, color="0.4", lw=0.8, ls="--")
    # mark block boundaries where the name prefix changes
    prefixes = [str(name).rsplit(":", 1)[0] for name in summary.index]
    for i in range(1, n):
        if prefixes[i] != prefixes[i - 1]:
            ax.axvline(i - 0.5, color="0.7", lw=0.8)
    ax.set_xlabel("element")
    ax.set_ylabel("effect")
    ax.set_title("Random effects: posterior mean and 95% interval")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def plot_fitted_values(summary, path) -> Optional[str]:
    """Linear-predictor mean and 95% band across the data rows."""
    if summary is None or len(summary) == 0:
        return None
    n = len(summary)
    idx = np.arange(n)
    mean = summary["mean"].to_numpy()
    lo = summary["0.025quant"].to_numpy()
    hi = summary["0.975quant"].to_numpy()
    fig, ax = plt.subplots(figsize=(max(6.0, min(0.08 * n, 14.0)), 4.0))
    ax.fill_between(idx, lo, hi, color="tab:orange", alpha=0.25,
                    label="95% interval")
    ax.plot(idx, mean, color="tab:orange", lw=1.2, label="mean")
    ax.set_xlabel("data row")
    ax.set_ylabel("linear predictor")
    ax.set_title("Fitted values")
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def plot_theta_grid(grid_frame, path) -> Optional[str]:
    """Exploration grid: weights over the hyperparameter support points.

    One free hyperparameter gives a stem plot, two give a weighted scatter;
    higher dimensions are skipped.
    """
    if grid_frame is None or len(grid_frame) == 0:
        return None
    cols = [c for c in grid_frame.columns
            if c not in ("log_posterior", "weight")]
    w = grid_frame["weight"].to_numpy()
    if len(cols) == 1:
        x = grid_frame[cols[0]].to_numpy()
        order = np.argsort(x)
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        ax.plot(x[order], w[order], "o-", ms=4)
        ax.set_xlabel(cols[0])
        ax.set_ylabel("weight")
    elif len(cols) == 2:
        fig, ax = plt.subplots(figsize=(6.0, 5.0))
        sc = ax.scatter(grid_frame[cols[0]], grid_frame[cols[1]],
                        c=w, s=30.0 + 270.0 * w / max(w.max(), 1e-300),
                        cmap="viridis")
        fig.colorbar(sc, ax=ax, label="weight")
        ax.set_xlabel(cols[0])
        ax.set_ylabel(cols[1])
    else:
        return None
    ax.set_title("Hyperparameter integration grid")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def render_report(result, out_dir) -> List[str]:
    """Render the standard figure set for a fit into out_dir.

    Writes fixed_marginals.png, hyperpar_marginals.png, random_effects.png,
    fitted_values.png and theta_grid.png as applicable; returns the paths
    actually written.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    jobs = [
        plot_fixed_marginals(result.marginals_fixed,
                             os.path.join(out_dir, "fixed_marginals.png")),
        plot_hyperpar_marginals(
            result.marginals_hyperpar,
            os.path.join(out_dir, "hyperpar_marginals.png")),
        plot_random_effects(result.summary_random,
                            os.path.join(out_dir, "random_effects.png")),
        plot_fitted_values(result.summary_fitted,
                           os.path.join(out_dir, "fitted_values.png")),
        plot_theta_grid(result.grid_frame(),
                        os.path.join(out_dir, "theta_grid.png")),
    ]
    for item in jobs:
        if item is not None:
            written.append(item)
    return written
