"""Posterior sampling from a fitted model.

Joint draws reuse the per-point Gaussian factors stored in the fit: pick a
grid point by its integration weight, draw the latent field from that
point's Gaussian, and condition the draw on any linear constraints.
Hyperparameter draws resample grid points and smooth within a grid cell.

Reproducibility: draw i uses its own counter-based Philox stream keyed by
(seed, i). Any partition of the draw indices across workers therefore
reproduces the serial output exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import pandas as pd

from .errors import ConfigNotStored
from .priors import from_internal
from .sparsela import sample_canonical

__all__ = ["Draw", "SampleList", "posterior_sample", "hyperpar_sample",
           "posterior_sample_eval"]


@dataclass
class Draw:
    """One joint posterior draw.

    theta holds the full internal-scale hyperparameter vector of the grid
    point the draw came from; x is the latent field draw (fixed effects
    first, then each component block).
    """

    theta: np.ndarray
    x: np.ndarray


class SampleList(list):
    """A list of Draws that remembers the model for name-based selection."""

    def __init__(self, draws, model):
        super().__init__(draws)
        self.model = model


def _draw_rng(seed: int, index: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _select_point(cum_weights: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return int(np.searchsorted(cum_weights, u, side="right").clip(
        0, cum_weights.size - 1))


def posterior_sample(n: int, fit, seed: int = 0) -> SampleList:
    """Draw n joint samples (theta, x) from the fitted approximation.

    Requires the fit to have kept its per-point factors
    (control.compute.config, on by default). Deterministic given seed.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not fit.model.spec.control.compute.config:
        raise ConfigNotStored(
            "joint sampling needs the stored per-point factors; refit with "
            "control.compute.config = true")
    grid = fit.grid
    cum = np.cumsum(grid.weights)
    draws = []
    for i in range(n):
        rng = _draw_rng(seed, i)
        k = _select_point(cum, rng)
        ga = grid.points[k].approx
        if ga.factor is None:
            x = np.zeros(0)
        else:
            x = sample_canonical(ga.factor, ga.b, rng)
            if ga.cm is not None:
                x = ga.cm.correct_sample(x, grid.C, grid.e)
        draws.append(Draw(theta=ga.theta.copy(), x=x))
    return SampleList(draws, fit.model)


def hyperpar_sample(n: int, fit, intern: bool = False, seed: int = 0,
                    cell_noise: bool = True) -> pd.DataFrame:
    """Draw n samples from the marginal hyperparameter posterior.

    Grid points are resampled by weight, then each draw is perturbed
    within its grid cell by a Gaussian in standardized coordinates
    (half a grid step; a full step when the grid collapsed to a single
    point, where the curvature is the only source of spread). Pass
    cell_noise=False for exact grid resampling. Columns follow the model's
    hyperparameter order; intern selects the internal (log/logit/fisher)
    scale, as natural-scale values otherwise.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    model = fit.model
    grid = fit.grid
    cum = np.cumsum(grid.weights)
    p = grid.free.size
    sd_z = 1.0 if len(grid.points) == 1 else 0.5 * grid.dz
    out = np.empty((n, len(model.hypers)))
    for i in range(n):
        rng = _draw_rng(seed, i)
        k = _select_point(cum, rng)
        z = grid.points[k].z
        if cell_noise and p:
            z = z + sd_z * rng.standard_normal(p)
        out[i] = grid.theta_of_z(z)
    if intern:
        names = [hp.name_internal for hp in model.hypers]
    else:
        names = [hp.name for hp in model.hypers]
        for j, hp in enumerate(model.hypers):
            out[:, j] = [from_internal(hp.transform, v) for v in out[:, j]]
    return pd.DataFrame(out, columns=names)


def posterior_sample_eval(selector: Union[str, Callable],
                          samples: SampleList) -> np.ndarray:
    """Extract or transform joint samples.

    A callable receives each Draw and its results are stacked. A string
    selects a latent element by name (as in the summary tables) or a whole
    layout block by its name ("fixed" or a component id), returning an
    (n_draws,) or (n_draws, block_length) array.
    """
    if callable(selector):
        return np.asarray([selector(d) for d in samples])
    layout = samples.model.layout
    names = list(layout.names)
    if selector in names:
        j = names.index(selector)
        return np.asarray([d.x[j] for d in samples])
    for block in layout.blocks:
        if block.name == selector:
            sl = slice(block.offset, block.offset + block.length)
            return np.asarray([d.x[sl] for d in samples])
    raise KeyError(
        "unknown selector %r: expected a latent element name, a block "
        "name, or a callable" % selector)
