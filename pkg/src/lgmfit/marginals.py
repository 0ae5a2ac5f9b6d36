"""Posterior marginal densities on grids, and operations over them.

A Marginal is a normalized univariate density tabulated on a strictly
increasing grid, interpolated with a monotone piecewise cubic (PCHIP).
The toolkit mirrors the usual post-processing verbs:

* dmarginal    density at a point (zero outside the support)
* pmarginal    cumulative distribution function
* qmarginal    quantile function
* tmarginal    change of variables through a monotone map
* emarginal    expectation of a function
* hpdmarginal  highest-posterior-density interval (unimodal only)
* zmarginal    summary statistics
* mmarginal    posterior mode
* rmarginal    random draws by inverse transform sampling
"""

from __future__ import annotations

from typing import Callable, Dict, Optional, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import MarginalError

__all__ = [
    "Marginal",
    "dmarginal",
    "pmarginal",
    "qmarginal",
    "tmarginal",
    "emarginal",
    "hpdmarginal",
    "zmarginal",
    "mmarginal",
    "rmarginal",
    "read_marginal_csv",
    "write_marginal_csv",
]

TAIL_BOUND = 1e-6


class Marginal:
    """Density values on a strictly increasing grid, normalized to mass one.

    strict_tails demands endpoint densities no larger than 1e-6 of the peak;
    change-of-variable results may concentrate mass near a support edge and
    construct with strict_tails=False.
    """

    def __init__(self, x, density, strict_tails: bool = True):
        x = np.asarray(x, dtype=np.float64).copy()
        d = np.asarray(density, dtype=np.float64).copy()
        if x.ndim != 1 or d.ndim != 1 or x.size != d.size:
            raise MarginalError("grid and density must be 1-d arrays of equal length")
        if x.size < 5:
            raise MarginalError("marginal grid needs at least 5 points")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(d)):
            raise MarginalError("marginal grid contains non-finite values")
        if np.any(np.diff(x) <= 0):
            raise MarginalError("marginal grid must be strictly increasing")
        if np.any(d < 0):
            raise MarginalError("marginal density must be non-negative")
        pch = PchipInterpolator(x, d, extrapolate=False)
        anti = pch.antiderivative()
        mass = float(anti(x[-1]) - anti(x[0]))
        if not (0.99 <= mass <= 1.01):
            raise MarginalError(
                f"marginal mass {mass:.6f} outside [0.99, 1.01]; "
                "supply a normalized density on a wide enough grid")
        d /= mass
        peak = float(d.max())
        if peak <= 0:
            raise MarginalError("marginal density is identically zero")
        if strict_tails and (d[0] > TAIL_BOUND * peak or d[-1] > TAIL_BOUND * peak):
            raise MarginalError(
                "endpoint density exceeds 1e-6 of the peak; widen the grid "
                "or construct with strict_tails=False")
        self.x = x
        self.density = d
        self._pchip = PchipInterpolator(x, d, extrapolate=False)
        self._anti = self._pchip.antiderivative()
        self._f0 = float(self._anti(x[0]))
        self._total = float(self._anti(x[-1]) - self._f0)

    def __len__(self) -> int:
        return int(self.x.size)

    @property
    def support(self):
        return float(self.x[0]), float(self.x[-1])

    def _dense(self, factor: int = 8):
        xs = np.unique(np.concatenate(
            [np.linspace(self.x[i], self.x[i + 1], factor + 1)
             for i in range(self.x.size - 1)]))
        return xs, np.maximum(self._pchip(xs), 0.0)


def _as_marginal(marginal) -> Marginal:
    if not isinstance(marginal, Marginal):
        raise MarginalError("expected a Marginal instance")
    return marginal


def dmarginal(x, marginal: Marginal):
    """Density at x; zero outside the tabulated support."""
    m = _as_marginal(marginal)
    xv = np.asarray(x, dtype=np.float64)
    out = m._pchip(xv)
    out = np.where(np.isnan(out), 0.0, np.maximum(out, 0.0))
    return float(out) if np.isscalar(x) or xv.ndim == 0 else out


def pmarginal(q, marginal: Marginal):
    """Cumulative probability P(X <= q)."""
    m = _as_marginal(marginal)
    qv = np.asarray(q, dtype=np.float64)
    qc = np.clip(qv, m.x[0], m.x[-1])
    val = (m._anti(qc) - m._f0) / m._total
    val = np.clip(val, 0.0, 1.0)
    val = np.where(qv < m.x[0], 0.0, val)
    val = np.where(qv > m.x[-1], 1.0, val)
    return float(val) if np.isscalar(q) or qv.ndim == 0 else val


def qmarginal(p, marginal: Marginal):
    """Quantile function; inverts the CDF by monotone bracketing."""
    m = _as_marginal(marginal)
    pv = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if np.any((pv < 0) | (pv > 1)):
        raise MarginalError("quantile probabilities must lie in [0, 1]")
    xs, _ = m._dense()
    Fs = np.clip((m._anti(xs) - m._f0) / m._total, 0.0, 1.0)
    Fs = np.maximum.accumulate(Fs)
    out = np.empty_like(pv)
    for i, pi in enumerate(pv):
        if pi <= Fs[0]:
            out[i] = xs[0]
            continue
        if pi >= Fs[-1]:
            out[i] = xs[-1]
            continue
        k = int(np.searchsorted(Fs, pi, side="left"))
        lo, hi = xs[k - 1], xs[k]
        flo = Fs[k - 1] - pi
        fhi = Fs[k] - pi
        if flo == 0.0:
            out[i] = lo
        elif fhi == 0.0:
            out[i] = hi
        else:
            fun = lambda t: float((m._anti(t) - m._f0) / m._total - pi)
            out[i] = brentq(fun, lo, hi, xtol=1e-12, rtol=1e-12)
    return float(out[0]) if np.isscalar(p) or np.asarray(p).ndim == 0 else out


def tmarginal(fun: Callable, marginal: Marginal, n: Optional[int] = None) -> Marginal:
    """Push the marginal through a strictly monotone map.

    The density transforms with the inverse-map Jacobian evaluated on the
    mapped grid and is renormalized.
    """
    m = _as_marginal(marginal)
    if n is not None and n > m.x.size:
        xs = np.linspace(m.x[0], m.x[-1], int(n))
        ds = np.maximum(m._pchip(xs), 0.0)
    else:
        xs, ds = m.x, m.density
    ys = np.asarray([float(fun(t)) for t in xs], dtype=np.float64)
    if not np.all(np.isfinite(ys)):
        raise MarginalError("transform produced non-finite grid values")
    dy = np.diff(ys)
    if np.all(dy > 0):
        pass
    elif np.all(dy < 0):
        ys = ys[::-1]
        ds = ds[::-1]
        xs = xs[::-1]
    else:
        raise MarginalError("transform must be strictly monotone over the support")
    # dx/dy on the mapped grid
    jac = np.abs(np.gradient(xs, ys))
    dens = ds * jac
    mass = trapezoid(dens, ys)
    if mass <= 0 or not np.isfinite(mass):
        raise MarginalError("transformed density has invalid mass")
    return Marginal(ys, dens / mass, strict_tails=False)


def emarginal(fun: Callable, marginal: Marginal) -> float:
    """Expectation of fun under the marginal (refined trapezoid rule)."""
    m = _as_marginal(marginal)
    xs, ds = m._dense(factor=4)
    fs = np.asarray([float(fun(t)) for t in xs], dtype=np.float64)
    mass = trapezoid(ds, xs)
    return float(trapezoid(fs * ds, xs) / mass)


def hpdmarginal(level: float, marginal: Marginal) -> np.ndarray:
    """Highest-posterior-density interval for a unimodal marginal.

    Water-filling construction: lower the density threshold until the region
    above it holds the requested mass. Raises MarginalError when that region
    is not a single interval.
    """
    m = _as_marginal(marginal)
    if not 0 < level < 1:
        raise MarginalError("hpd level must lie strictly between 0 and 1")
    xs, ds = m._dense(factor=16)

    def interval_at(t):
        """Continuous interval {x : density >= t}, or None if multimodal."""
        above = ds >= t
        idx = np.flatnonzero(above)
        if idx.size == 0:
            return None
        if np.any(np.diff(idx) > 1):
            raise MarginalError("hpd interval undefined: marginal is multimodal")
        lo_i, hi_i = int(idx[0]), int(idx[-1])
        lo, hi = xs[lo_i], xs[hi_i]
        f = lambda v: float(m._pchip(v) - t)
        if lo_i > 0 and f(xs[lo_i - 1]) < 0 < f(xs[lo_i]):
            lo = brentq(f, xs[lo_i - 1], xs[lo_i], xtol=1e-13)
        if hi_i < xs.size - 1 and f(xs[hi_i + 1]) < 0 < f(xs[hi_i]):
            hi = brentq(f, xs[hi_i], xs[hi_i + 1], xtol=1e-13)
        return float(lo), float(hi)

    def mass_at(t):
        seg = interval_at(t)
        if seg is None:
            return 0.0
        return pmarginal(seg[1], m) - pmarginal(seg[0], m)

    lo_t, hi_t = 0.0, float(ds.max())
    for _ in range(100):
        mid = 0.5 * (lo_t + hi_t)
        if mass_at(mid) >= level:
            lo_t = mid
        else:
            hi_t = mid
    seg = interval_at(lo_t)
    if seg is None:
        raise MarginalError("hpd threshold search failed")
    return np.array(seg)


def mmarginal(marginal: Marginal) -> float:
    """Posterior mode located on a refined grid."""
    m = _as_marginal(marginal)
    xs, ds = m._dense(factor=8)
    return float(xs[int(np.argmax(ds))])


def zmarginal(marginal: Marginal) -> Dict[str, float]:
    """Summary statistics: mean, sd, median and 2.5%/97.5% quantiles."""
    m = _as_marginal(marginal)
    mean = emarginal(lambda t: t, m)
    second = emarginal(lambda t: t * t, m)
    var = max(second - mean * mean, 0.0)
    q = qmarginal(np.array([0.025, 0.5, 0.975]), m)
    return {
        "mean": mean,
        "sd": float(np.sqrt(var)),
        "quant0.025": float(q[0]),
        "quant0.5": float(q[1]),
        "quant0.975": float(q[2]),
    }


def rmarginal(n: int, marginal: Marginal,
              seed: Union[int, np.random.Generator] = 0) -> np.ndarray:
    """Inverse-transform draws from the marginal (seeded, reproducible)."""
    m = _as_marginal(marginal)
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.Generator(np.random.Philox(int(seed)))
    u = rng.random(int(n))
    xs, _ = m._dense(factor=32)
    Fs = np.clip((m._anti(xs) - m._f0) / m._total, 0.0, 1.0)
    Fs = np.maximum.accumulate(Fs)
    return np.interp(u, Fs, xs)


# ---------------------------------------------------------------------------
# delimited IO
# ---------------------------------------------------------------------------

def write_marginal_csv(path, marginal: Marginal) -> None:
    """Write the grid as a two-column CSV (x, density), 12 digits."""
    m = _as_marginal(marginal)
    df = pd.DataFrame({"x": m.x, "density": m.density})
    df.to_csv(path, index=False, float_format="%.12g")


def read_marginal_csv(path, strict_tails: bool = False) -> Marginal:
    """Read a two-column CSV written by write_marginal_csv."""
    df = pd.read_csv(path)
    cols = {c.lower(): c for c in df.columns}
    if "x" not in cols or "density" not in cols:
        raise MarginalError("marginal CSV needs columns 'x' and 'density'")
    return Marginal(df[cols["x"]].to_numpy(), df[cols["density"]].to_numpy(),
                    strict_tails=strict_tails)
