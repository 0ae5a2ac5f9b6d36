"""Hyperprior log-densities on the internal optimization scale.

Every prior is evaluated on the internal scale of its hyperparameter (log
precision, Fisher-transformed correlation, logit mixing fraction, or raw
value), with the change-of-variables Jacobian included, so that the engine
can add these terms directly to the log-posterior of the internal vector.

Penalized-complexity priors are implemented from their construction: an
exponential density with rate lambda on the distance scale d = sqrt(2 KLD)
measured from a base model, pushed back through d to the parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import interpolate, optimize, special

from .errors import ModelSpecError

PRIOR_NAMES = ("pc.prec", "pc.cor1", "pc.cor0", "pc", "loggamma",
               "gaussian", "flat", "table")

# Listed prior names that parse-error cleanly instead of guessing a density.
UNIMPLEMENTED_PRIORS = ("pc.dof", "betacorrelation")

TRANSFORMS = ("log", "fisher", "logit", "identity")

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """A named hyperprior with its parameter vector.

    For the table prior, params holds the interleaved grid; the normalized
    interpolator is built once at construction and kept in _table.
    """

    name: str
    params: tuple
    _table: object = field(default=None, repr=False, compare=False)


def make_prior(name: str, params=None) -> PriorSpec:
    """Validate and construct a PriorSpec."""
    if name in UNIMPLEMENTED_PRIORS:
        raise ModelSpecError("prior %r is recognized but not implemented" % name)
    if name not in PRIOR_NAMES:
        raise ModelSpecError(
            "unknown prior %r (choose from %s)" % (name, ", ".join(PRIOR_NAMES)))
    if params is None:
        params = []
    if name == "table":
        theta, logdens = _parse_table_params(params)
        table = _TablePrior(theta, logdens)
        flat = tuple(theta) + tuple(logdens)
        return PriorSpec(name=name, params=flat, _table=table)
    params = tuple(float(v) for v in np.asarray(params, dtype=float).ravel())
    if name in ("pc.prec", "pc.cor0", "pc.cor1", "pc"):
        if len(params) != 2:
            raise ModelSpecError("prior %r needs params [U, alpha]" % name)
        u, alpha = params
        if not (alpha > 0.0 and alpha < 1.0):
            raise ModelSpecError("prior %r needs alpha in (0, 1)" % name)
        if name == "pc.prec" and u <= 0:
            raise ModelSpecError("pc.prec needs U > 0")
        if name in ("pc.cor0", "pc") and not (0.0 < u < 1.0):
            raise ModelSpecError("prior %r needs U in (0, 1)" % name)
        if name == "pc.cor1" and not (-1.0 < u < 1.0):
            raise ModelSpecError("pc.cor1 needs U in (-1, 1)")
    elif name == "loggamma":
        if len(params) != 2 or params[0] <= 0 or params[1] <= 0:
            raise ModelSpecError("loggamma needs params [a > 0, b > 0]")
    elif name == "gaussian":
        if len(params) != 2 or params[1] <= 0:
            raise ModelSpecError("gaussian prior needs params [mean, precision > 0]")
    elif name == "flat":
        if len(params) != 0:
            raise ModelSpecError("flat prior takes no params")
    return PriorSpec(name=name, params=params)


def _parse_table_params(params):
    """Accept [[theta...], [logdens...]] or a flat even-length list."""
    if (isinstance(params, (list, tuple)) and len(params) == 2
            and isinstance(params[0], (list, tuple, np.ndarray))):
        theta = np.asarray(params[0], dtype=float)
        logdens = np.asarray(params[1], dtype=float)
    else:
        flat = np.asarray(params, dtype=float).ravel()
        if flat.size % 2 != 0:
            raise ModelSpecError("table prior grid must pair values with log-densities")
        half = flat.size // 2
        theta, logdens = flat[:half], flat[half:]
    if theta.size < 5:
        raise ModelSpecError("table prior needs at least 5 grid points")
    if theta.size != logdens.size:
        raise ModelSpecError("table prior grids must have equal length")
    if np.any(np.diff(theta) <= 0):
        raise ModelSpecError("table prior grid must be strictly increasing")
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(logdens))):
        raise ModelSpecError("table prior grid must be finite")
    return theta, logdens


class _TablePrior:
    """Monotone interpolation of a user grid, normalized at load."""

    def __init__(self, theta, logdens):
        self.lo = float(theta[0])
        self.hi = float(theta[-1])
        self.interp = interpolate.PchipInterpolator(theta, logdens)
        xs = np.linspace(self.lo, self.hi, max(4096, theta.size * 64))
        ref = float(np.max(logdens))
        mass = np.trapezoid(np.exp(self.interp(xs) - ref), xs)
        self.log_norm = ref + math.log(mass)

    def logpdf(self, theta):
        if theta < self.lo or theta > self.hi:
            return -math.inf
        return float(self.interp(theta)) - self.log_norm


# -- internal-scale transforms ------------------------------------------------

def to_internal(transform: str, value: float) -> float:
    """Natural scale -> internal scale."""
    v = float(value)
    if transform == "log":
        if v <= 0:
            raise ModelSpecError("log transform needs a positive value")
        return math.log(v)
    if transform == "fisher":
        if not (-1.0 < v < 1.0):
            raise ModelSpecError("fisher transform needs a value in (-1, 1)")
        return math.log((1.0 + v) / (1.0 - v))
    if transform == "logit":
        if not (0.0 < v < 1.0):
            raise ModelSpecError("logit transform needs a value in (0, 1)")
        return math.log(v / (1.0 - v))
    if transform == "identity":
        return v
    raise ModelSpecError("unknown internal transform %r" % transform)


def from_internal(transform: str, theta: float) -> float:
    """Internal scale -> natural scale."""
    t = float(theta)
    if transform == "log":
        return math.exp(t)
    if transform == "fisher":
        return math.tanh(t / 2.0)
    if transform == "logit":
        return float(special.expit(t))
    if transform == "identity":
        return t
    raise ModelSpecError("unknown internal transform %r" % transform)


# -- penalized-complexity helpers ---------------------------------------------

@lru_cache(maxsize=256)
def _truncated_exp_rate(d_target: float, d_max: float, alpha: float) -> float:
    """Rate lambda with P(d < d_target) = alpha for d ~ Exp(lambda) on (0, d_max).

    The lambda -> 0 limit of the left-tail mass is d_target/d_max; alpha on
    either side of that limit selects the sign of lambda (a negative rate is
    still a proper density on the bounded interval).
    """
    ratio = d_target / d_max
    if abs(alpha - ratio) < 1e-12:
        return 0.0

    def gap(lam):
        num = -math.expm1(-lam * d_target)
        den = -math.expm1(-lam * d_max)
        return num / den - alpha

    if alpha > ratio:
        lo, hi = 1e-10, 1.0
        while gap(hi) < 0 and hi < 1e6:
            hi *= 2.0
    else:
        hi, lo = -1e-10, -1.0
        while gap(lo) > 0 and lo > -1e6:
            lo *= 2.0
    return float(optimize.brentq(gap, lo, hi, xtol=1e-12, rtol=1e-14))


def _log_truncated_exp(d: float, lam: float, d_max: float) -> float:
    """log density of the (possibly negative-rate) exponential on (0, d_max)."""
    if lam == 0.0:
        return -math.log(d_max)
    den = -math.expm1(-lam * d_max)
    return math.log(lam / den) - lam * d


@lru_cache(maxsize=64)
def _bym2_phi_setup(gamma_key: tuple, u: float, alpha: float):
    """(lambda, d_max) for the mixing-fraction prior given spectrum gamma."""
    gamma = np.asarray(gamma_key, dtype=float)
    d_u = _bym2_phi_distance(u, gamma)
    d_max = _bym2_phi_distance(1.0, gamma)
    lam = _truncated_exp_rate(d_u, d_max, alpha)
    return lam, d_max


def _bym2_phi_distance(phi: float, gamma: np.ndarray) -> float:
    """Distance d(phi) = sqrt(2 KLD) from the unstructured base model.

    The mixed covariance (1-phi) I + phi Sigma* is compared with I on the
    subspace where the structured part is proper; gamma holds the positive
    eigenvalues of Sigma*.
    """
    mix = 1.0 - phi + phi * gamma
    two_kld = phi * float(np.sum(gamma - 1.0)) - float(np.sum(np.log(mix)))
    return math.sqrt(max(two_kld, 0.0))


def _bym2_phi_ddist(phi: float, gamma: np.ndarray) -> float:
    """d'(phi), with the analytic phi -> 0 limit."""
    d = _bym2_phi_distance(phi, gamma)
    c0 = math.sqrt(0.5 * float(np.sum((gamma - 1.0) ** 2)))
    if d < 1e-10:
        return c0
    mix = 1.0 - phi + phi * gamma
    dkld = 0.5 * phi * float(np.sum((gamma - 1.0) ** 2 / mix))
    return dkld / d


# -- log densities ------------------------------------------------------------

def log_prior_internal(p: PriorSpec, transform: str, theta: float,
                       context=None) -> float:
    """Log prior density of one hyperparameter on its internal scale.

    context supplies model-dependent inputs: the positive spectrum of the
    scaled structure covariance for the "pc" mixing-fraction prior.
    """
    t = float(theta)
    if not math.isfinite(t):
        raise ModelSpecError("hyperparameter value must be finite")
    name = p.name

    if name == "flat":
        return 0.0

    if name == "gaussian":
        mean, prec = p.params
        return 0.5 * (math.log(prec) - LOG_2PI) - 0.5 * prec * (t - mean) ** 2

    if name == "loggamma":
        a, b = p.params
        return a * math.log(b) - special.gammaln(a) + a * t - b * math.exp(t)

    if name == "pc.prec":
        # exponential on the standard deviation sigma = exp(-theta/2)
        u, alpha = p.params
        lam = -math.log(alpha) / u
        return math.log(lam / 2.0) - t / 2.0 - lam * math.exp(-t / 2.0)

    if name == "pc.cor1":
        # base at correlation 1; d(rho) = sqrt(1 - rho) on (0, sqrt(2)),
        # calibrated by P(rho > U) = alpha
        u, alpha = p.params
        d_u = math.sqrt(1.0 - u)
        d_max = math.sqrt(2.0)
        lam = _truncated_exp_rate(d_u, d_max, alpha)
        one_m_rho = 2.0 * float(special.expit(-t))
        one_p_rho = 2.0 * float(special.expit(t))
        d = math.sqrt(one_m_rho)
        # |dd/drho| = 1/(2d); drho/dtheta = (1-rho^2)/2 = one_m*one_p/2
        jac = math.log(one_p_rho * d / 4.0)
        return _log_truncated_exp(d, lam, d_max) + jac

    if name == "pc.cor0":
        # base at correlation 0; d(rho) = sqrt(-log(1 - rho^2)),
        # calibrated by P(|rho| > U) = alpha
        u, alpha = p.params
        d_u = math.sqrt(-math.log1p(-u * u))
        lam = -math.log(alpha) / d_u
        rho = math.tanh(t / 2.0)
        one_m_rho2 = 4.0 * float(special.expit(t)) * float(special.expit(-t))
        d = math.sqrt(max(-math.log(one_m_rho2), 0.0))
        if abs(rho) < 1e-8:
            branch = 0.0  # limit of log(|rho|/d) as rho -> 0
        else:
            branch = math.log(abs(rho) / d)
        return math.log(lam / 4.0) - lam * d + branch

    if name == "pc":
        # mixing fraction of a scaled structured effect, base at 0,
        # calibrated by P(phi < U) = alpha; context holds the spectrum
        if context is None:
            raise ModelSpecError(
                "the pc mixing-fraction prior needs the component spectrum")
        gamma = np.asarray(context, dtype=float)
        if gamma.size == 0 or np.any(gamma <= 0):
            raise ModelSpecError("pc prior spectrum must be positive")
        u, alpha = p.params
        lam, d_max = _bym2_phi_setup(tuple(gamma.tolist()), u, alpha)
        phi = float(special.expit(t))
        d = _bym2_phi_distance(phi, gamma)
        ddist = _bym2_phi_ddist(phi, gamma)
        jac = math.log(max(ddist, 1e-300)) + math.log(phi * (1.0 - phi))
        return _log_truncated_exp(d, lam, d_max) + jac

    if name == "table":
        return p._table.logpdf(t)

    raise ModelSpecError("unknown prior %r" % name)
