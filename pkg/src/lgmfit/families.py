"""Observation likelihood families.

Each family maps the linear predictor eta to the response mean through its
link function and provides the per-observation log-density together with its
first two derivatives in eta. Curvatures are returned as h = -d2/deta2 of the
log-density and floored at a small positive value so that downstream Newton
systems stay positive definite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DataError, ModelSpecError

LOG_2PI = math.log(2.0 * math.pi)
CURVATURE_FLOOR = 1e-8

# Largest exponent fed to exp(); keeps log-densities finite for any eta the
# optimizer can visit instead of overflowing to inf.
_EXP_CAP = 700.0

_DEFAULT_LINKS = {
    "gaussian": "identity",
    "poisson": "log",
    "binomial": "logit",
    "nbinomial": "log",
    "gamma": "log",
    "beta": "logit",
}

FAMILY_NAMES = tuple(sorted(_DEFAULT_LINKS))

# Families with one likelihood hyperparameter, all handled internally on the
# log scale: (natural-scale label, internal-scale label).
_HYPER_LABELS = {
    "gaussian": ("Precision for the gaussian observations",
                 "Log precision for the gaussian observations"),
    "nbinomial": ("Size for the nbinomial observations",
                  "Log size for the nbinomial observations"),
    "gamma": ("Shape for the gamma observations",
              "Log shape for the gamma observations"),
    "beta": ("Precision for the beta observations",
             "Log precision for the beta observations"),
}

# Default hyperprior and optimizer initial (internal scale) per family.
_HYPER_DEFAULTS = {
    "gaussian": ("pc.prec", [1.0, 0.01], 0.0),
    "nbinomial": ("loggamma", [1.0, 0.1], 0.0),
    "gamma": ("loggamma", [1.0, 0.1], 0.0),
    "beta": ("loggamma", [1.0, 0.1], 0.0),
}


@dataclass(frozen=True)
class Family:
    """An observation model identified by name, with its link function."""

    name: str
    link: str

    @property
    def n_hyper(self) -> int:
        return 1 if self.name in _HYPER_LABELS else 0

    @property
    def hyper_label(self) -> str:
        return _HYPER_LABELS[self.name][0]

    @property
    def hyper_label_internal(self) -> str:
        return _HYPER_LABELS[self.name][1]

    @property
    def hyper_default(self):
        """(prior name, prior params, internal initial) for theta2."""
        return _HYPER_DEFAULTS[self.name]


def get_family(name: str, link: str | None = None) -> Family:
    """Look up a family by name, optionally checking the requested link."""
    if name not in _DEFAULT_LINKS:
        raise ModelSpecError(
            "unknown family %r (choose from %s)" % (name, ", ".join(FAMILY_NAMES)))
    default = _DEFAULT_LINKS[name]
    if link is None:
        link = default
    elif link != default:
        raise ModelSpecError(
            "link %r is not supported for family %r (use %r)"
            % (link, name, default))
    return Family(name=name, link=link)


@dataclass
class ObservationAux:
    """Auxiliary observation data: count multipliers and trial counts."""

    E: np.ndarray
    Ntrials: np.ndarray

    @classmethod
    def for_n(cls, n: int, E=None, Ntrials=None) -> "ObservationAux":
        if E is None:
            E_arr = np.ones(n)
        else:
            E_arr = np.asarray(E, dtype=float)
            if E_arr.shape != (n,):
                raise DataError("E has length %d, expected %d" % (E_arr.size, n))
            if not np.all(np.isfinite(E_arr)) or np.any(E_arr <= 0):
                raise DataError("E entries must be finite and positive")
        if Ntrials is None:
            ntr = np.ones(n)
        else:
            ntr = np.asarray(Ntrials, dtype=float)
            if ntr.shape != (n,):
                raise DataError(
                    "Ntrials has length %d, expected %d" % (ntr.size, n))
            if (not np.all(np.isfinite(ntr)) or np.any(ntr < 1)
                    or np.any(ntr != np.round(ntr))):
                raise DataError("Ntrials entries must be positive integers")
        return cls(E=E_arr, Ntrials=ntr)


def _safe_exp(x):
    return np.exp(np.minimum(x, _EXP_CAP))


def _aux_for(y: np.ndarray, aux: ObservationAux | None) -> ObservationAux:
    if aux is None:
        return ObservationAux.for_n(y.size)
    return aux


def _require_theta2(fam: Family, theta2) -> float:
    if theta2 is None:
        raise ModelSpecError(
            "family %r needs a likelihood hyperparameter" % fam.name)
    return float(theta2)


def validate_support(fam: Family, y, aux: ObservationAux | None = None) -> None:
    """Raise DataError when any response value is outside the family support."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DataError("response contains non-finite values")
    name = fam.name
    if name in ("poisson", "nbinomial"):
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise DataError(
                "%s responses must be nonnegative integers" % name)
    elif name == "binomial":
        ntr = _aux_for(y, aux).Ntrials
        if np.any(y < 0) or np.any(y != np.round(y)) or np.any(y > ntr):
            raise DataError(
                "binomial responses must be integers in [0, Ntrials]")
    elif name == "gamma":
        if np.any(y <= 0):
            raise DataError("gamma responses must be positive")
    elif name == "beta":
        if np.any(y <= 0) or np.any(y >= 1):
            raise DataError("beta responses must lie strictly in (0, 1)")


def loglik(fam: Family, y, eta, theta2=None,
           aux: ObservationAux | None = None) -> np.ndarray:
    """Per-observation log-density, normalizing constants included."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    validate_support(fam, y, aux)
    name = fam.name
    if name == "gaussian":
        lt = _require_theta2(fam, theta2)
        tau = math.exp(lt)
        return 0.5 * (lt - LOG_2PI) - 0.5 * tau * (y - eta) ** 2
    if name == "poisson":
        E = _aux_for(y, aux).E
        log_mu = np.log(E) + eta
        mu = _safe_exp(log_mu)
        return y * log_mu - mu - special.gammaln(y + 1.0)
    if name == "binomial":
        ntr = _aux_for(y, aux).Ntrials
        binom = (special.gammaln(ntr + 1.0) - special.gammaln(y + 1.0)
                 - special.gammaln(ntr - y + 1.0))
        return binom + y * eta - ntr * np.logaddexp(0.0, eta)
    if name == "nbinomial":
        lphi = _require_theta2(fam, theta2)
        phi = math.exp(lphi)
        E = _aux_for(y, aux).E
        log_mu = np.log(E) + eta
        mu = _safe_exp(log_mu)
        return (special.gammaln(y + phi) - special.gammaln(phi)
                - special.gammaln(y + 1.0)
                + phi * lphi + y * log_mu - (y + phi) * np.log(phi + mu))
    if name == "gamma":
        lphi = _require_theta2(fam, theta2)
        phi = math.exp(lphi)
        return (phi * lphi - special.gammaln(phi) + (phi - 1.0) * np.log(y)
                - phi * (eta + y * _safe_exp(-eta)))
    if name == "beta":
        lphi = _require_theta2(fam, theta2)
        phi = math.exp(lphi)
        mu = np.clip(special.expit(eta), 1e-15, 1.0 - 1e-15)
        a = mu * phi
        b = (1.0 - mu) * phi
        return (special.gammaln(phi) - special.gammaln(a) - special.gammaln(b)
                + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y))
    raise ModelSpecError("unknown family %r" % name)


def loglik_derivs(fam: Family, y, eta, theta2=None,
                  aux: ObservationAux | None = None):
    """Gradient g = dl/deta and curvature h = -d2l/deta2, h floored.

    The floor keeps working precisions positive definite when the observed
    curvature degenerates (beta tails).
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    validate_support(fam, y, aux)
    name = fam.name
    if name == "gaussian":
        tau = math.exp(_require_theta2(fam, theta2))
        g = tau * (y - eta)
        h = np.full_like(eta, tau)
    elif name == "poisson":
        E = _aux_for(y, aux).E
        mu = _safe_exp(np.log(E) + eta)
        g = y - mu
        h = mu.copy()
    elif name == "binomial":
        ntr = _aux_for(y, aux).Ntrials
        p = special.expit(eta)
        g = y - ntr * p
        h = ntr * p * (1.0 - p)
    elif name == "nbinomial":
        phi = math.exp(_require_theta2(fam, theta2))
        E = _aux_for(y, aux).E
        mu = _safe_exp(np.log(E) + eta)
        g = phi * (y - mu) / (phi + mu)
        h = phi * mu * (y + phi) / (phi + mu) ** 2
    elif name == "gamma":
        phi = math.exp(_require_theta2(fam, theta2))
        r = y * _safe_exp(-eta)
        g = phi * (r - 1.0)
        h = phi * r
    elif name == "beta":
        phi = math.exp(_require_theta2(fam, theta2))
        mu = np.clip(special.expit(eta), 1e-15, 1.0 - 1e-15)
        w = mu * (1.0 - mu)
        t = (np.log(y) - np.log1p(-y)
             - special.digamma(mu * phi) + special.digamma((1.0 - mu) * phi))
        g = phi * w * t
        trig = (special.polygamma(1, mu * phi)
                + special.polygamma(1, (1.0 - mu) * phi))
        h = phi ** 2 * w ** 2 * trig - phi * (1.0 - 2.0 * mu) * w * t
    else:
        raise ModelSpecError("unknown family %r" % name)
    return g, np.maximum(h, CURVATURE_FLOOR)


def link_fun(fam: Family, mu) -> np.ndarray:
    """Map the mean to the linear-predictor scale."""
    mu = np.asarray(mu, dtype=float)
    if fam.link == "identity":
        return mu.copy()
    if fam.link == "log":
        if np.any(mu <= 0):
            raise DataError("log link needs positive values")
        return np.log(mu)
    if fam.link == "logit":
        if np.any(mu <= 0) or np.any(mu >= 1):
            raise DataError("logit link needs values strictly in (0, 1)")
        return np.log(mu) - np.log1p(-mu)
    raise ModelSpecError("unknown link %r" % fam.link)


def inv_link(fam: Family, eta) -> np.ndarray:
    """Map the linear predictor back to the mean scale."""
    eta = np.asarray(eta, dtype=float)
    if fam.link == "identity":
        return eta.copy()
    if fam.link == "log":
        return _safe_exp(eta)
    if fam.link == "logit":
        return special.expit(eta)
    raise ModelSpecError("unknown link %r" % fam.link)
