"""Deterministic nested-Laplace inference for latent Gaussian models.

The pipeline fits models of the form

    y_i | eta_i, theta2  ~  family(eta_i, theta2)
    eta = A x,   x | theta ~ N(0, Q(theta)^-1)  subject to  C x = e
    theta ~ prior

in four stages. For each hyperparameter value theta a Gaussian approximation
to p(x | y, theta) is built by Newton iteration on the latent field. The
resulting approximate log hyperposterior is maximized with a quasi-Newton
search, then explored on a standardized grid centered at the mode. Latent and
linear-predictor marginals are Gaussian mixtures over the grid; hyperparameter
marginals come from interpolating the grid weights. All steps are
deterministic: repeated runs, and runs with different worker-thread counts,
produce identical numbers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.interpolate
import scipy.linalg
import scipy.sparse as sp
import scipy.stats
from scipy.special import logsumexp

from .errors import DataError, FitFailed, ModelSpecError, NonConvergence, \
    NotPositiveDefinite
from .families import ObservationAux, loglik, loglik_derivs
from .gmrf import assemble_component_precision, component_jitter
from .marginals import TAIL_BOUND, Marginal, emarginal, mmarginal, qmarginal, \
    tmarginal
from .model import Model, ModelSpec, build_model, normalize_model
from .priors import from_internal, log_prior_internal
from .sparsela import CholFactor, SparseSym, constrain_moments, factorize, \
    partial_inverse, solve

__all__ = [
    "SafeOpts",
    "GaussianApprox",
    "ModeResult",
    "GridPoint",
    "ThetaGrid",
    "Diagnostics",
    "FitResult",
    "free_indices",
    "initial_theta",
    "expand_theta",
    "family_theta2",
    "component_theta_natural",
    "log_prior_theta",
    "prior_median_internal",
    "assemble_precision",
    "stack_constraints",
    "gaussian_approximation",
    "log_posterior_theta",
    "find_mode",
    "build_grid",
    "fit",
]

# Newton iteration on the latent field.
NEWTON_MAX_ITER = 50
NEWTON_XTOL = 1e-6
NEWTON_GRAD_TOL = 1e-9

# Quasi-Newton search over the hyperparameters.
MODE_MAX_ITER = 100
MODE_GRAD_STEP = 0.005
MODE_HESS_STEP = 0.01
MODE_GRAD_TOL = 1e-3
MODE_FTOL = 1e-4
ARMIJO_C1 = 1e-4
ARMIJO_MIN_STEP = 1e-10

# Grid exploration.
GRID_MAX_STEPS = 100
HESS_EIG_FLOOR = 1e-6

# Marginal construction.
MARGINAL_POINTS = 75
GH_POINTS = 21


# ---------------------------------------------------------------------------
# hyperparameter plumbing
# ---------------------------------------------------------------------------

def theta_slices(model: Model) -> Tuple[slice, List[slice]]:
    """Slices of the internal theta vector: family part, then per component."""
    n_comp = sum(len(c.hyper) for c in model.components)
    k = model.n_hyper - n_comp
    comp_slices = []
    off = k
    for comp in model.components:
        m = len(comp.hyper)
        comp_slices.append(slice(off, off + m))
        off += m
    return slice(0, k), comp_slices


def free_indices(model: Model) -> np.ndarray:
    """Positions of the non-fixed hyperparameters in the theta vector."""
    return np.array([i for i, hp in enumerate(model.hypers) if not hp.fixed],
                    dtype=np.int64)


def initial_theta(model: Model) -> np.ndarray:
    """Full internal starting vector (fixed entries at their fixed values)."""
    return np.array([hp.initial for hp in model.hypers], dtype=np.float64)


def expand_theta(model: Model, theta_free: np.ndarray) -> np.ndarray:
    """Embed free values into the full vector, fixed entries untouched."""
    full = initial_theta(model)
    idx = free_indices(model)
    theta_free = np.asarray(theta_free, dtype=np.float64)
    if theta_free.shape != (idx.size,):
        raise ValueError("expected %d free values, got shape %r"
                         % (idx.size, theta_free.shape))
    full[idx] = theta_free
    return full


def family_theta2(model: Model, theta_full: np.ndarray) -> Optional[float]:
    """Internal-scale likelihood hyperparameter, or None for fixed families."""
    fam_slice, _ = theta_slices(model)
    if fam_slice.stop == 0:
        return None
    return float(theta_full[0])


def component_theta_natural(model: Model, comp_index: int,
                            theta_full: np.ndarray) -> Tuple[float, ...]:
    """Natural-scale hyperparameter tuple for one latent component."""
    _, comp_slices = theta_slices(model)
    sl = comp_slices[comp_index]
    hypers = model.components[comp_index].hyper
    return tuple(from_internal(hp.transform, theta_full[sl.start + j])
                 for j, hp in enumerate(hypers))


def log_prior_theta(model: Model, theta_full: np.ndarray) -> float:
    """Joint log prior over the free hyperparameters, internal scale.

    Fixed hyperparameters are conditioned on, not integrated over, so their
    prior factors are excluded; this keeps the evidence of a fully fixed
    model equal to its closed-form value.
    """
    total = 0.0
    for i, hp in enumerate(model.hypers):
        if hp.fixed:
            continue
        ctx = np.asarray(hp.context, dtype=float) if hp.context is not None \
            else None
        total += log_prior_internal(hp.prior, hp.transform,
                                    float(theta_full[i]), context=ctx)
    return total


def prior_median_internal(hp) -> float:
    """Internal-scale prior median, used as the restart point in safe mode."""
    name = hp.prior.name
    params = hp.prior.params
    if name == "flat":
        return 0.0
    if name == "gaussian":
        return float(params[0])
    if name == "pc.prec":
        u, alpha = float(params[0]), float(params[1])
        lam = -math.log(alpha) / u
        return -2.0 * math.log(math.log(2.0) / lam)
    if name == "loggamma":
        a, b = float(params[0]), float(params[1])
        return float(np.log(scipy.stats.gamma.ppf(0.5, a, scale=1.0 / b)))
    # bounded or spectrum-dependent priors: invert the CDF numerically
    half = {"log": 20.0, "fisher": 14.0, "logit": 14.0}[hp.transform]
    grid = np.linspace(-half, half, 4001)
    ctx = np.asarray(hp.context, dtype=float) if hp.context is not None \
        else None
    logd = np.array([log_prior_internal(hp.prior, hp.transform, t, context=ctx)
                     for t in grid])
    dens = np.exp(logd - np.max(logd))
    cdf = np.concatenate([[0.0], np.cumsum(
        0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    return float(np.interp(0.5, cdf, grid))


# ---------------------------------------------------------------------------
# precision assembly and constraints
# ---------------------------------------------------------------------------

def assemble_precision(model: Model, theta_full: np.ndarray,
                       jitter_mult: float = 1.0) -> SparseSym:
    """Joint prior precision of the latent field at one theta value.

    Block diagonal: fixed-effect prior precisions first, then each component
    block at its natural-scale hyperparameter values. Intrinsic blocks get
    their stabilizing diagonal jitter here so every later factorization and
    log-determinant sees the same matrix.
    """
    N = model.layout.N
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    p = model.prior_diag.size
    if p:
        idx = np.arange(p)
        rows.append(idx)
        cols.append(idx)
        vals.append(model.prior_diag.astype(np.float64))
    for k, comp in enumerate(model.components):
        block = model.layout.block(comp.id)
        tnat = component_theta_natural(model, k, theta_full)
        Qb = assemble_component_precision(comp.structure, tnat)
        br, bc, bv = _sym_triplets(Qb)
        rows.append(br + block.offset)
        cols.append(bc + block.offset)
        vals.append(bv)
        eps = component_jitter(comp.structure, tnat) * jitter_mult
        if eps > 0.0:
            didx = np.arange(block.offset, block.offset + block.length)
            rows.append(didx)
            cols.append(didx)
            vals.append(np.full(block.length, eps))
    if rows:
        rows_a = np.concatenate(rows)
        cols_a = np.concatenate(cols)
        vals_a = np.concatenate(vals)
    else:
        rows_a = np.zeros(0, dtype=np.int64)
        cols_a = np.zeros(0, dtype=np.int64)
        vals_a = np.zeros(0)
    return SparseSym.from_triplets(N, rows_a, cols_a, vals_a)


def _sym_triplets(S: SparseSym) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower-triangle triplets of a symmetric sparse matrix."""
    counts = np.diff(S.indptr)
    cols = np.repeat(np.arange(S.n), counts)
    return S.indices.copy(), cols, S.values.copy()


def stack_constraints(model: Model):
    """Joint linear constraints C x = e, or (None, None) when there are none."""
    rows = []
    evals = []
    N = model.layout.N
    for comp in model.components:
        cs = comp.structure
        if cs.C is None:
            continue
        block = model.layout.block(comp.id)
        wide = np.zeros((cs.C.shape[0], N))
        wide[:, block.offset:block.offset + block.length] = cs.C
        rows.append(wide)
        evals.append(cs.e if cs.e is not None else np.zeros(cs.C.shape[0]))
    if not rows:
        return None, None
    return np.vstack(rows), np.concatenate(evals)


# ---------------------------------------------------------------------------
# per-theta Gaussian approximation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SafeOpts:
    """Numerical hardening knobs; the defaults are the plain first attempt."""

    damp: float = 1.0           # initial Newton step fraction
    clamp: float = 0.0          # extra floor on observation curvatures
    jitter_mult: float = 1.0    # multiplier on intrinsic-block jitter
    step_scale: float = 1.0     # shrinks finite-difference steps
    restart: bool = False       # start the search from the prior medians


@dataclass
class GaussianApprox:
    """Gaussian approximation to p(x | y, theta) at one theta value."""

    theta: np.ndarray            # full internal hyperparameter vector
    x: np.ndarray                # constrained mean (the latent mode)
    eta: np.ndarray              # A @ x over all data rows
    b: np.ndarray                # canonical vector of the working precision
    factor: Optional[CholFactor]         # factor of P = Q + A' H A
    cm: object                   # kriging pieces for the constraints, or None
    log_post: float              # unnormalized log hyperposterior at theta
    n_iter: int                  # Newton iterations used
    diag_var: Optional[np.ndarray] = None  # constrained marginal variances


@dataclass
class _FitContext:
    """Per-fit immutable pieces shared by every theta evaluation."""

    model: Model
    A_obs: sp.csr_matrix
    y_obs: np.ndarray
    aux_obs: ObservationAux
    C: Optional[np.ndarray]
    e: Optional[np.ndarray]
    opts: SafeOpts


def _make_context(model: Model, opts: SafeOpts) -> _FitContext:
    mask = model.observed_mask
    A_obs = model.A[mask]
    aux = ObservationAux(E=model.aux.E[mask], Ntrials=model.aux.Ntrials[mask])
    C, e = stack_constraints(model)
    return _FitContext(model=model, A_obs=A_obs, y_obs=model.y[mask],
                       aux_obs=aux, C=C, e=e, opts=opts)


def _loglik_sum(ctx: _FitContext, eta_obs: np.ndarray,
                theta2: Optional[float]) -> float:
    if ctx.y_obs.size == 0:
        return 0.0
    return float(np.sum(loglik(ctx.model.family, ctx.y_obs, eta_obs,
                               theta2, ctx.aux_obs)))


def _newton_latent(ctx: _FitContext, Q_full: sp.csc_matrix,
                   theta2: Optional[float], x0: Optional[np.ndarray]):
    """Latent-field Newton iteration for fixed theta.

    Returns (x, factor, b, n_iter) where x solves the working system at
    convergence, factor holds P = Q + A' H A at x, and b is the matching
    canonical vector, so N(P^-1 b, P^-1) is the unconstrained approximation.
    """
    model = ctx.model
    fam = model.family
    A = ctx.A_obs
    y = ctx.y_obs
    N = model.layout.N
    x = np.zeros(N) if x0 is None else np.asarray(x0, dtype=np.float64).copy()

    def working_parts(xv):
        eta = A @ xv
        g, h = loglik_derivs(fam, y, eta, theta2, ctx.aux_obs)
        if ctx.opts.clamp > 0.0:
            h = np.maximum(h, ctx.opts.clamp)
        b = A.T @ (g + h * eta)
        P = SparseSym.from_scipy(Q_full + A.T @ sp.diags(h) @ A)
        return eta, g, b, P

    def psi(xv):
        # the objective the Newton steps climb: loglik minus prior quadratic
        eta = A @ xv
        return _loglik_sum(ctx, eta, theta2) - 0.5 * float(xv @ (Q_full @ xv))

    psi_x = psi(x)
    for it in range(1, NEWTON_MAX_ITER + 1):
        eta, g, b, P = working_parts(x)
        F = factorize(P)
        x_new = solve(F, b)

        if it == 1:
            # a quadratic log-likelihood lands exactly in one step; detect
            # it from the vanishing gradient and stop without a second pass
            g2, _ = loglik_derivs(fam, y, A @ x_new, theta2, ctx.aux_obs)
            grad = A.T @ g2 - Q_full @ x_new
            scale = 1.0 + float(np.max(np.abs(b)))
            if float(np.max(np.abs(grad))) <= NEWTON_GRAD_TOL * scale:
                return _finalize_newton(ctx, Q_full, theta2, x_new, 1)

        step = float(np.max(np.abs(x_new - x)))
        ref = 1.0 + float(np.max(np.abs(x)))
        if step < NEWTON_XTOL * ref:
            return _finalize_newton(ctx, Q_full, theta2, x_new, it)

        # step-halving safeguard: back off while the objective drops
        alpha = ctx.opts.damp
        accepted = None
        for _ in range(12):
            cand = x + alpha * (x_new - x)
            val = psi(cand)
            if val >= psi_x:
                accepted = (cand, val)
                break
            alpha *= 0.5
        if accepted is None:
            # no improving fraction found: take the smallest step anyway
            # and let the iteration cap decide
            cand = x + alpha * (x_new - x)
            accepted = (cand, psi(cand))
        x, psi_x = accepted

    raise NonConvergence(
        "gaussian approximation: latent Newton iteration did not converge "
        "within %d steps" % NEWTON_MAX_ITER)


def _finalize_newton(ctx: _FitContext, Q_full, theta2, x, n_iter):
    """Recompute the working system at the accepted point so the returned
    factor, canonical vector and mean are mutually consistent."""
    A = ctx.A_obs
    eta = A @ x
    g, h = loglik_derivs(ctx.model.family, ctx.y_obs, eta, theta2,
                         ctx.aux_obs)
    if ctx.opts.clamp > 0.0:
        h = np.maximum(h, ctx.opts.clamp)
    b = A.T @ (g + h * eta)
    P = SparseSym.from_scipy(Q_full + A.T @ sp.diags(h) @ A)
    F = factorize(P)
    return np.asarray(solve(F, b)).ravel(), F, b, n_iter


def log_posterior_theta(model_or_ctx, theta_full: np.ndarray,
                        x0: Optional[np.ndarray] = None) -> "GaussianApprox":
    """Evaluate the approximate log hyperposterior at one theta value.

    Returns the Gaussian approximation with its `log_post` field set to

        log prior(theta) + 1/2 log|Q| + 1/2 log|C Q^-1 C'|
        - 1/2 log|P| - 1/2 log|C P^-1 C'|
        + loglik(y | x_c) - 1/2 x_c' Q x_c  (+ 1/2 e' (C Q^-1 C')^-1 e)

    where Q is the (jittered) prior precision, P the working precision of
    the latent approximation and x_c its constrained mean. The jitter and
    all 2 pi factors cancel between the prior and approximation terms.
    """
    if isinstance(model_or_ctx, _FitContext):
        ctx = model_or_ctx
    else:
        ctx = _make_context(model_or_ctx, SafeOpts())
    model = ctx.model
    theta_full = np.asarray(theta_full, dtype=np.float64)
    theta2 = family_theta2(model, theta_full)
    lp = log_prior_theta(model, theta_full)

    N = model.layout.N
    if N == 0:
        # no latent field: the approximation is exact and empty
        eta = np.zeros(model.n_obs)
        ll = _loglik_sum(ctx, eta[model.observed_mask], theta2)
        return GaussianApprox(theta=theta_full, x=np.zeros(0), eta=eta,
                              b=np.zeros(0), factor=None, cm=None,
                              log_post=lp + ll, n_iter=0,
                              diag_var=np.zeros(0))

    Q = assemble_precision(model, theta_full, ctx.opts.jitter_mult)
    Q_full = Q.to_scipy()
    F_Q = factorize(Q)
    lp += 0.5 * F_Q.logdet

    x, F_P, b, n_iter = _newton_latent(ctx, Q_full, theta2, x0)
    lp -= 0.5 * F_P.logdet

    mu = x
    cm = None
    if ctx.C is not None:
        cm_Q = constrain_moments(F_Q, ctx.C)
        cm = constrain_moments(F_P, ctx.C, e=ctx.e, mean=mu)
        lp += 0.5 * cm_Q.logdet_M - 0.5 * cm.logdet_M
        if np.any(ctx.e):
            r = scipy.linalg.cho_solve(cm_Q.M_cho, ctx.e)
            lp += 0.5 * float(ctx.e @ r)
        x_c = cm.mean
    else:
        x_c = mu

    eta_all = model.A @ x_c
    ll = _loglik_sum(ctx, eta_all[model.observed_mask], theta2)
    lp += ll - 0.5 * float(x_c @ (Q_full @ x_c))

    return GaussianApprox(theta=theta_full, x=x_c, eta=eta_all, b=b,
                          factor=F_P, cm=cm, log_post=lp, n_iter=n_iter)


def gaussian_approximation(model: Model, theta_full: np.ndarray,
                           x0: Optional[np.ndarray] = None,
                           opts: SafeOpts = SafeOpts()) -> GaussianApprox:
    """Public single-theta entry point, with marginal variances filled in."""
    ctx = _make_context(model, opts)
    ga = log_posterior_theta(ctx, theta_full, x0=x0)
    _fill_variances(ctx, ga)
    return ga


def _fill_variances(ctx: _FitContext, ga: GaussianApprox) -> None:
    """Constrained marginal variances of the latent field, in place."""
    if ga.diag_var is not None:
        return
    d = partial_inverse(ga.factor).diag()
    if ga.cm is not None:
        W = ga.cm.W
        V = scipy.linalg.cho_solve(ga.cm.M_cho, W.T)
        d = d - np.einsum("ik,ki->i", W, V)
    ga.diag_var = np.maximum(d, 0.0)


# ---------------------------------------------------------------------------
# mode search over the hyperparameters
# ---------------------------------------------------------------------------

@dataclass
class ModeResult:
    """Outcome of the hyperparameter mode search."""

    theta: np.ndarray            # full internal vector at the mode
    approx: GaussianApprox
    H: np.ndarray                # negated Hessian of the log posterior (free dims)
    eigvals: np.ndarray          # eigenvalues of H, floored
    eigvecs: np.ndarray
    n_eval: int


def _try_eval(ctx: _FitContext, theta_free, template_eval,
              warm_x) -> Optional[GaussianApprox]:
    """Evaluate, mapping numerical failures to None (an unusable point)."""
    try:
        return template_eval(theta_free, warm_x)
    except (NotPositiveDefinite, NonConvergence):
        return None


def find_mode(ctx: _FitContext, theta0_full: np.ndarray) -> ModeResult:
    """Quasi-Newton ascent of the approximate log hyperposterior.

    Minimizes the negated objective with BFGS on the free coordinates:
    central-difference gradients, backtracking line search, and a final
    central-difference Hessian whose eigenvalues are floored to keep the
    standardized grid transform well defined.
    """
    model = ctx.model
    idx = free_indices(model)
    p = idx.size
    n_eval = [0]
    warm = {"x": None}

    def raw_eval(tf: np.ndarray, x_start) -> GaussianApprox:
        theta = initial_theta(model)
        theta[idx] = tf
        n_eval[0] += 1
        return log_posterior_theta(ctx, theta, x0=x_start)

    if p == 0:
        ga = raw_eval(np.zeros(0), None)
        return ModeResult(theta=ga.theta, approx=ga,
                          H=np.zeros((0, 0)), eigvals=np.zeros(0),
                          eigvecs=np.zeros((0, 0)), n_eval=n_eval[0])

    hg = MODE_GRAD_STEP * ctx.opts.step_scale

    def grad_at(tf: np.ndarray) -> np.ndarray:
        g = np.zeros(p)
        for i in range(p):
            ei = np.zeros(p)
            ei[i] = hg
            up = raw_eval(tf + ei, warm["x"])
            dn = raw_eval(tf - ei, warm["x"])
            g[i] = -(up.log_post - dn.log_post) / (2.0 * hg)
        return g

    t = theta0_full[idx].astype(np.float64).copy()
    ga = raw_eval(t, None)
    warm["x"] = ga.x
    f = -ga.log_post
    g = grad_at(t)
    Hinv = np.eye(p)
    converged = float(np.max(np.abs(g))) < MODE_GRAD_TOL

    it = 0
    while not converged:
        it += 1
        if it > MODE_MAX_ITER:
            raise NonConvergence(
                "mode search: no convergence within %d iterations"
                % MODE_MAX_ITER)
        d = -Hinv @ g
        slope = float(d @ g)
        if slope >= 0.0:
            Hinv = np.eye(p)
            d = -g
            slope = -float(g @ g)
        alpha = 1.0
        accepted = None
        while alpha >= ARMIJO_MIN_STEP:
            cand = _try_eval(ctx, t + alpha * d, raw_eval, warm["x"])
            if cand is not None and \
                    -cand.log_post <= f + ARMIJO_C1 * alpha * slope:
                accepted = cand
                break
            alpha *= 0.5
        if accepted is None:
            raise NonConvergence(
                "mode search: line search failed below step %g"
                % ARMIJO_MIN_STEP)
        t_new = t + alpha * d
        f_new = -accepted.log_post
        warm["x"] = accepted.x
        g_new = grad_at(t_new)
        if float(np.max(np.abs(g_new))) < MODE_GRAD_TOL and \
                abs(f_new - f) < MODE_FTOL:
            t, f, ga, g = t_new, f_new, accepted, g_new
            break
        s = t_new - t
        yv = g_new - g
        ys = float(yv @ s)
        if ys <= 1e-12:
            Hinv = np.eye(p)
        else:
            rho = 1.0 / ys
            I = np.eye(p)
            V = I - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        t, f, ga, g = t_new, f_new, accepted, g_new

    H = _neg_hessian(ctx, t, raw_eval, warm["x"])
    w, V = np.linalg.eigh(H)
    w = np.maximum(w, HESS_EIG_FLOOR)
    return ModeResult(theta=ga.theta, approx=ga, H=H, eigvals=w, eigvecs=V,
                      n_eval=n_eval[0])


def _neg_hessian(ctx: _FitContext, t: np.ndarray, raw_eval,
                 warm_x) -> np.ndarray:
    """Negated central-difference Hessian of the log posterior at the mode."""
    p = t.size
    h = MODE_HESS_STEP * ctx.opts.step_scale
    f0 = -raw_eval(t, warm_x).log_post

    def fval(point):
        ga = _try_eval(ctx, point, raw_eval, warm_x)
        if ga is None:
            raise NonConvergence(
                "mode search: curvature evaluation failed near the mode")
        return -ga.log_post

    H = np.zeros((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h
        fp = fval(t + ei)
        fm = fval(t - ei)
        H[i, i] = (fp - 2.0 * f0 + fm) / (h * h)
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = h
            fpp = fval(t + ei + ej)
            fpm = fval(t + ei - ej)
            fmp = fval(t - ei + ej)
            fmm = fval(t - ei - ej)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h * h)
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# grid over the hyperparameters
# ---------------------------------------------------------------------------

@dataclass
class GridPoint:
    z: np.ndarray                # standardized coordinates, free dims
    theta: np.ndarray            # full internal vector
    log_post: float
    weight: float
    approx: GaussianApprox


@dataclass
class ThetaGrid:
    """Weighted exploration grid in standardized hyperparameter space."""

    mode: ModeResult
    free: np.ndarray
    dz: float
    cutoff: float
    eigvals: np.ndarray
    eigvecs: np.ndarray
    points: List[GridPoint]
    C: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None

    @property
    def weights(self) -> np.ndarray:
        return np.array([pt.weight for pt in self.points])

    def theta_of_z(self, z: np.ndarray) -> np.ndarray:
        theta = self.mode.theta.copy()
        if self.free.size:
            theta[self.free] = theta[self.free] + \
                self.eigvecs @ (np.asarray(z) / np.sqrt(self.eigvals))
        return theta


def build_grid(ctx: _FitContext, mode: ModeResult,
               threads: int = 1) -> ThetaGrid:
    """Explore the standardized posterior around the mode.

    Axis walks run outward one step at a time, keeping points whose log
    posterior stays within the cutoff of the mode value. Off-axis candidates
    (the full integer tensor for one or two free dimensions, the diagonal
    corners otherwise) are then screened in one deterministic batch; batch
    evaluations may be spread over worker threads without changing any
    result, because every evaluation starts from the same latent warm start.
    """
    model = ctx.model
    control = model.spec.control
    dz = control.int_dz
    cutoff = control.int_diff_logdens
    idx = free_indices(model)
    p = idx.size

    grid = ThetaGrid(mode=mode, free=idx, dz=dz, cutoff=cutoff,
                     eigvals=mode.eigvals, eigvecs=mode.eigvecs,
                     points=[], C=ctx.C, e=ctx.e)
    lp0 = mode.approx.log_post
    grid.points.append(GridPoint(z=np.zeros(p), theta=mode.theta,
                                 log_post=lp0, weight=1.0,
                                 approx=mode.approx))
    if p == 0:
        return grid

    x_star = mode.approx.x

    def eval_z(z: np.ndarray) -> Optional[GaussianApprox]:
        theta = grid.theta_of_z(z)
        try:
            return log_posterior_theta(ctx, theta, x0=x_star)
        except (NotPositiveDefinite, NonConvergence):
            return None

    # sequential axis walks, recording how far each direction reaches
    extents = np.zeros((p, 2), dtype=np.int64)
    for i in range(p):
        for d, sign in enumerate((1.0, -1.0)):
            for k in range(1, GRID_MAX_STEPS + 1):
                z = np.zeros(p)
                z[i] = sign * k * dz
                ga = eval_z(z)
                if ga is None or lp0 - ga.log_post >= cutoff:
                    extents[i, d] = k - 1
                    break
                grid.points.append(GridPoint(z=z, theta=ga.theta,
                                             log_post=ga.log_post,
                                             weight=0.0, approx=ga))
            else:
                raise NonConvergence(
                    "theta grid: posterior still flat after %d steps along "
                    "axis %d; the mode or curvature is unreliable"
                    % (GRID_MAX_STEPS, i))

    # off-axis candidates in one deterministic batch
    candidates: List[np.ndarray] = []
    if p <= 2:
        ranges = [range(-int(extents[i, 1]), int(extents[i, 0]) + 1)
                  for i in range(p)]
        for combo in _tensor_combos(ranges):
            if np.count_nonzero(combo) >= 2:
                candidates.append(np.asarray(combo, dtype=float) * dz)
    else:
        for signs in _tensor_combos([(-1, 1)] * p):
            ext = np.array([extents[i, 0] if s > 0 else extents[i, 1]
                            for i, s in enumerate(signs)])
            if np.all(ext > 0):
                candidates.append(np.asarray(signs, dtype=float) * ext * dz)

    if candidates:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(eval_z, candidates))
        else:
            results = [eval_z(z) for z in candidates]
        for z, ga in zip(candidates, results):
            if ga is not None and lp0 - ga.log_post < cutoff:
                grid.points.append(GridPoint(z=z, theta=ga.theta,
                                             log_post=ga.log_post,
                                             weight=0.0, approx=ga))

    lps = np.array([pt.log_post for pt in grid.points])
    w = np.exp(lps - np.max(lps))
    w /= np.sum(w)
    for pt, wk in zip(grid.points, w):
        pt.weight = float(wk)
    return grid


def _tensor_combos(ranges):
    """Cartesian product in deterministic (row-major) order."""
    out = [[]]
    for r in ranges:
        out = [combo + [v] for combo in out for v in r]
    return [tuple(c) for c in out]


# ---------------------------------------------------------------------------
# mixture marginals for the latent field and linear predictor
# ---------------------------------------------------------------------------

_GH_T, _GH_W = np.polynomial.hermite.hermgauss(GH_POINTS)
_GH_LOGW = np.log(_GH_W) - 0.5 * math.log(math.pi)


def _mixture_moments(weights, means, varis):
    """Mean and variance of a Gaussian mixture, columnwise.

    means/varis have one row per mixture component; weights is 1-d.
    """
    m = weights @ means
    second = weights @ (varis + means ** 2)
    return m, np.maximum(second - m * m, 0.0)


def _mixture_logpdf(xs, weights, mus, sds):
    """log density of a 1-d Gaussian mixture at the points xs."""
    xs = np.asarray(xs)[:, None]
    lw = np.log(weights)[None, :]
    z = (xs - mus[None, :]) / sds[None, :]
    comp = lw - 0.5 * z * z - np.log(sds)[None, :] - 0.5 * math.log(2 * math.pi)
    return logsumexp(comp, axis=1)


def _mixture_marginal(weights, mus, sds, mean, sd) -> Optional[Marginal]:
    """Gridded marginal of a 1-d Gaussian mixture, tails verified.

    The grid is widened until the endpoint densities are negligible, and
    refined when a sharp mixture component leaves visible quadrature error
    in the gridded mass.
    """
    if sd <= 0.0 or not np.isfinite(sd):
        return None
    n_points = MARGINAL_POINTS
    narrowest = float(np.min(sds[weights > 0], initial=sd))
    if narrowest > 0:
        # resolve the sharpest component with a few points per sd
        needed = int(math.ceil(48.0 * sd / narrowest)) + 1
        n_points = max(n_points, min(needed, 1201))
    for half_width in (6.0, 8.0, 10.0, 14.0):
        xs = np.linspace(mean - half_width * sd, mean + half_width * sd,
                         n_points)
        dens = np.exp(_mixture_logpdf(xs, weights, mus, sds))
        mass = float(np.trapezoid(dens, xs))
        if mass > 0:
            dens = dens / mass
        peak = float(np.max(dens))
        if peak > 0 and max(dens[0], dens[-1]) <= TAIL_BOUND * peak:
            return Marginal(xs, dens)
    return Marginal(xs, dens, strict_tails=False)


def _mixture_kld(mu0, sd0, weights, mus, sds) -> float:
    """KL divergence of the modal-theta Gaussian from the full mixture.

    Quantifies how much the hyperparameter uncertainty deforms one latent
    marginal away from its single-theta Gaussian; zero when the grid has one
    point. Gauss-Hermite in the modal Gaussian's own coordinates.
    """
    if sd0 <= 0.0:
        return 0.0
    xs = mu0 + math.sqrt(2.0) * sd0 * _GH_T
    log_mix = _mixture_logpdf(xs, weights, mus, sds)
    ent = -0.5 * math.log(2.0 * math.pi * sd0 * sd0) - 0.5
    cross = float(np.exp(_GH_LOGW) @ log_mix)
    return max(ent - cross, 0.0)


def _summarize_mixture(weights, mus_mat, var_mat, names, with_kld=True):
    """Summary table plus per-element marginals for mixture columns.

    mus_mat/var_mat: (n_points, n_elements). The first mixture row must be
    the modal-theta point (used for the kld column).
    """
    sds_mat = np.sqrt(var_mat)
    mean, var = _mixture_moments(weights, mus_mat, var_mat)
    sd = np.sqrt(var)
    n = mean.size
    q025 = np.empty(n)
    q50 = np.empty(n)
    q975 = np.empty(n)
    mode = np.empty(n)
    kld = np.zeros(n)
    margs: Dict[str, Optional[Marginal]] = {}
    for j in range(n):
        marg = _mixture_marginal(weights, mus_mat[:, j], sds_mat[:, j],
                                 mean[j], sd[j])
        margs[names[j]] = marg
        if marg is None:
            q025[j] = q50[j] = q975[j] = mode[j] = mean[j]
            continue
        q025[j] = qmarginal(0.025, marg)
        q50[j] = qmarginal(0.5, marg)
        q975[j] = qmarginal(0.975, marg)
        mode[j] = mmarginal(marg)
        if with_kld:
            kld[j] = _mixture_kld(mus_mat[0, j], sds_mat[0, j],
                                  weights, mus_mat[:, j], sds_mat[:, j])
    cols = {"mean": mean, "sd": sd, "0.025quant": q025, "0.5quant": q50,
            "0.975quant": q975, "mode": mode}
    if with_kld:
        cols["kld"] = kld
    return pd.DataFrame(cols, index=list(names)), margs


def latent_marginals(ctx: _FitContext, grid: ThetaGrid):
    """Summaries and marginals for every latent element."""
    model = ctx.model
    N = model.layout.N
    names = model.layout.names
    if N == 0:
        empty = pd.DataFrame(columns=["mean", "sd", "0.025quant", "0.5quant",
                                      "0.975quant", "mode", "kld"])
        return empty, {}
    K = len(grid.points)
    mus = np.empty((K, N))
    varis = np.empty((K, N))
    for k, pt in enumerate(grid.points):
        _fill_variances(ctx, pt.approx)
        mus[k] = pt.approx.x
        varis[k] = pt.approx.diag_var
    return _summarize_mixture(grid.weights, mus, varis, names)


def fitted_values(ctx: _FitContext, grid: ThetaGrid):
    """Linear-predictor summaries per data row, plus per-grid-point moments.

    Rows with a missing response get predictive marginals from the same
    mixture; nothing conditions on them. Returns (summary, marginals,
    eta_means, eta_vars) where the last two are (n_points, n_rows) arrays
    reused by the predictive diagnostics.
    """
    model = ctx.model
    n = model.n_obs
    N = model.layout.N
    K = len(grid.points)
    eta_means = np.empty((K, n))
    eta_vars = np.zeros((K, n))
    A_dense = np.asarray(model.A.todense())
    for k, pt in enumerate(grid.points):
        ga = pt.approx
        eta_means[k] = ga.eta
        if N == 0:
            continue
        V = solve(ga.factor, A_dense.T)
        V = V.reshape(N, n)
        var_unc = np.einsum("ij,ji->i", A_dense, V)
        if ga.cm is not None:
            WA = grid.C @ V
            U = scipy.linalg.cho_solve(ga.cm.M_cho, WA)
            var_unc = var_unc - np.einsum("ki,ki->i", WA, U)
        eta_vars[k] = np.maximum(var_unc, 0.0)
    names = ["fitted:%d" % (i + 1) for i in range(n)]
    summary, margs = _summarize_mixture(grid.weights, eta_means, eta_vars,
                                        names, with_kld=False)
    return summary, margs, eta_means, eta_vars


# ---------------------------------------------------------------------------
# hyperparameter marginals
# ---------------------------------------------------------------------------

def _aggregate_axis(thetas: np.ndarray, weights: np.ndarray):
    """Collapse grid weights onto unique values of one theta coordinate."""
    keys = np.round(thetas, 12)
    order = np.argsort(keys, kind="stable")
    uniq: List[float] = []
    agg: List[float] = []
    for pos in order:
        k = keys[pos]
        if uniq and k == uniq[-1]:
            agg[-1] += weights[pos]
        else:
            uniq.append(float(k))
            agg.append(float(weights[pos]))
    return np.array(uniq), np.array(agg)


def _extend_tails(xs: np.ndarray, logd: np.ndarray):
    """Extend a log-density point set with quadratic tails.

    The grid retains points only while the log posterior stays within the
    exploration cutoff, which clips the tails and would bias the spread of
    the interpolated marginal low. A quadratic through the outer three
    points restores the Gaussian tail exactly in the Gaussian case; the
    extension stops once the extrapolated density is negligible.
    """
    drop = 20.0
    top = float(np.max(logd))
    for side in (0, 1):
        for _ in range(10):
            if side == 0:
                px, py = xs[:3], logd[:3]
                step = xs[1] - xs[0]
                edge = xs[0]
            else:
                px, py = xs[-3:], logd[-3:]
                step = xs[-1] - xs[-2]
                edge = xs[-1]
            coef = np.polyfit(px, py, 2)
            new_x = edge - step if side == 0 else edge + step
            new_y = float(np.polyval(coef, new_x))
            edge_y = py[0] if side == 0 else py[-1]
            if new_y >= edge_y:
                break
            if side == 0:
                xs = np.concatenate([[new_x], xs])
                logd = np.concatenate([[new_y], logd])
            else:
                xs = np.concatenate([xs, [new_x]])
                logd = np.concatenate([logd, [new_y]])
            if new_y <= top - drop:
                break
    return xs, logd


def hyperpar_marginals(ctx: _FitContext, grid: ThetaGrid):
    """Natural-scale summaries and marginals of the free hyperparameters."""
    model = ctx.model
    idx = grid.free
    if idx.size == 0:
        return None, {}
    thetas = np.array([pt.theta for pt in grid.points])
    weights = grid.weights
    rows = []
    margs: Dict[str, Marginal] = {}
    for col, hyper_index in enumerate(idx):
        hp = model.hypers[hyper_index]
        xs, w = _aggregate_axis(thetas[:, hyper_index], weights)
        if xs.size >= 3:
            logd = np.log(np.maximum(w, 1e-300))
            xs, logd = _extend_tails(xs, logd)
            interp = scipy.interpolate.PchipInterpolator(xs, logd)
            dense = np.linspace(xs[0], xs[-1], MARGINAL_POINTS)
            dens = np.exp(interp(dense) - np.max(logd))
            dens /= np.trapezoid(dens, dense)
            internal = Marginal(dense, dens, strict_tails=False)
        else:
            # a nearly fixed axis: fall back to the curvature at the mode
            mode = grid.mode
            Hinv = mode.eigvecs @ np.diag(1.0 / mode.eigvals) @ mode.eigvecs.T
            sd = math.sqrt(max(Hinv[col, col], HESS_EIG_FLOOR))
            center = float(grid.mode.theta[hyper_index])
            dense = np.linspace(center - 6.0 * sd, center + 6.0 * sd,
                                MARGINAL_POINTS)
            dens = np.exp(-0.5 * ((dense - center) / sd) ** 2)
            dens /= np.trapezoid(dens, dense)
            internal = Marginal(dense, dens, strict_tails=False)
        natural = tmarginal(lambda t: from_internal(hp.transform, t),
                            internal)
        margs[hp.name] = natural
        mean = emarginal(lambda v: v, natural)
        second = emarginal(lambda v: v * v, natural)
        sd = math.sqrt(max(second - mean * mean, 0.0))
        rows.append({"mean": mean, "sd": sd,
                     "0.025quant": qmarginal(0.025, natural),
                     "0.5quant": qmarginal(0.5, natural),
                     "0.975quant": qmarginal(0.975, natural),
                     "mode": mmarginal(natural)})
    summary = pd.DataFrame(rows, index=[model.hypers[i].name for i in idx])
    return summary, margs


# ---------------------------------------------------------------------------
# predictive diagnostics and evidence
# ---------------------------------------------------------------------------

@dataclass
class Diagnostics:
    """Model-comparison quantities integrated over the grid."""

    mlik: float
    dic: Optional[float] = None
    p_dic: Optional[float] = None
    mean_deviance: Optional[float] = None
    waic: Optional[float] = None
    p_waic: Optional[float] = None
    cpo: Optional[np.ndarray] = None
    cpo_failure: Optional[np.ndarray] = None


def _log_evidence(grid: ThetaGrid) -> float:
    """Riemann evidence estimate over the standardized grid.

    Each grid cell has volume dz^p in z space; the map back to theta space
    contributes the constant Jacobian prod(lambda)^(-1/2).
    """
    lps = np.array([pt.log_post for pt in grid.points])
    p = grid.free.size
    vol = p * math.log(grid.dz) if p else 0.0
    jac = -0.5 * float(np.sum(np.log(grid.eigvals))) if p else 0.0
    return float(logsumexp(lps)) + vol + jac


def diagnostics(ctx: _FitContext, grid: ThetaGrid,
                eta_means: np.ndarray, eta_vars: np.ndarray) -> Diagnostics:
    """Evidence plus the requested predictive criteria.

    Per-observation integrals over the linear predictor use Gauss-Hermite
    quadrature against each grid point's Gaussian, then mix over the grid.
    """
    model = ctx.model
    out = Diagnostics(mlik=_log_evidence(grid))
    flags = model.spec.control.compute
    if not (flags.dic or flags.waic or flags.cpo):
        return out

    mask = model.observed_mask
    obs_idx = np.flatnonzero(mask)
    n_obs = obs_idx.size
    K = len(grid.points)
    weights = grid.weights
    y = ctx.y_obs
    fam = model.family
    aux = ctx.aux_obs

    # per grid point: E[loglik], E[loglik^2], E[p(y|eta)], E[1/p(y|eta)]
    e_ll = np.zeros((K, n_obs))
    e_ll2 = np.zeros((K, n_obs))
    log_e_p = np.zeros((K, n_obs))
    log_e_inv = np.zeros((K, n_obs))
    theta2_nat = np.zeros(K)
    has_theta2 = family_theta2(model, grid.points[0].theta) is not None
    for k, pt in enumerate(grid.points):
        theta2 = family_theta2(model, pt.theta)
        if has_theta2:
            theta2_nat[k] = math.exp(theta2)
        mu = eta_means[k][obs_idx]
        sd = np.sqrt(eta_vars[k][obs_idx])
        etas = mu[None, :] + math.sqrt(2.0) * sd[None, :] * _GH_T[:, None]
        ll = loglik(fam, y[None, :], etas, theta2, aux)
        gw = np.exp(_GH_LOGW)[:, None]
        e_ll[k] = np.sum(gw * ll, axis=0)
        e_ll2[k] = np.sum(gw * ll * ll, axis=0)
        log_e_p[k] = logsumexp(_GH_LOGW[:, None] + ll, axis=0)
        log_e_inv[k] = logsumexp(_GH_LOGW[:, None] - ll, axis=0)

    logw = np.log(weights)
    if flags.dic:
        mean_dev = -2.0 * float(weights @ np.sum(e_ll, axis=1))
        eta_bar = (weights @ eta_means)[obs_idx]
        theta2_bar = None
        if has_theta2:
            theta2_bar = math.log(float(weights @ theta2_nat))
        dev_at_mean = -2.0 * float(np.sum(
            loglik(fam, y, eta_bar, theta2_bar, aux)))
        p_dic = mean_dev - dev_at_mean
        out.dic = dev_at_mean + 2.0 * p_dic
        out.p_dic = p_dic
        out.mean_deviance = mean_dev
    if flags.waic:
        lppd_i = logsumexp(logw[:, None] + log_e_p, axis=0)
        mean_ll = weights @ e_ll
        mean_ll2 = weights @ e_ll2
        p_i = np.maximum(mean_ll2 - mean_ll ** 2, 0.0)
        out.waic = -2.0 * float(np.sum(lppd_i - p_i))
        out.p_waic = float(np.sum(p_i))
    if flags.cpo:
        log_inv = logsumexp(logw[:, None] + log_e_inv, axis=0)
        cpo_obs = np.exp(-log_inv)
        cpo = np.full(model.n_obs, np.nan)
        cpo[obs_idx] = cpo_obs
        failure = np.zeros(model.n_obs)
        failure[obs_idx] = (~np.isfinite(cpo_obs)).astype(float)
        out.cpo = cpo
        out.cpo_failure = failure
    return out


# ---------------------------------------------------------------------------
# the fit pipeline
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    """Everything the fit produces, ready for reporting or sampling."""

    model: Model
    mode: ModeResult
    grid: ThetaGrid
    summary_fixed: Optional[pd.DataFrame]
    summary_random: Optional[pd.DataFrame]
    summary_hyperpar: Optional[pd.DataFrame]
    summary_fitted: pd.DataFrame
    marginals_fixed: Dict[str, Marginal]
    marginals_random: Dict[str, Marginal]
    marginals_hyperpar: Dict[str, Marginal]
    marginals_fitted: Dict[str, Marginal]
    diagnostics: Diagnostics
    safe_retry_used: bool = False

    @property
    def mlik(self) -> float:
        return self.diagnostics.mlik

    def grid_frame(self) -> pd.DataFrame:
        """The exploration grid as a table: theta values, log posterior,
        normalized weight."""
        idx = self.grid.free
        cols = {}
        for col, hyper_index in enumerate(idx):
            name = self.model.hypers[hyper_index].name_internal
            cols[name] = np.array([pt.theta[hyper_index]
                                   for pt in self.grid.points])
        cols["log_posterior"] = np.array([pt.log_post
                                          for pt in self.grid.points])
        cols["weight"] = self.grid.weights
        return pd.DataFrame(cols)


def _pipeline(model: Model, threads: int, opts: SafeOpts) -> FitResult:
    ctx = _make_context(model, opts)
    theta0 = initial_theta(model)
    if opts.restart:
        idx = free_indices(model)
        for i in idx:
            theta0[i] = prior_median_internal(model.hypers[i])
    mode = find_mode(ctx, theta0)
    grid = build_grid(ctx, mode, threads=threads)

    summary_latent, margs_latent = latent_marginals(ctx, grid)
    p = model.prior_diag.size
    fixed_names = list(model.layout.names[:p])
    summary_fixed = summary_latent.iloc[:p] if p else None
    summary_random = summary_latent.iloc[p:] if model.components else None
    margs_fixed = {k: margs_latent[k] for k in fixed_names}
    margs_random = {k: margs_latent[k]
                    for k in model.layout.names[p:]}

    summary_fitted, margs_fitted, eta_means, eta_vars = \
        fitted_values(ctx, grid)
    summary_hyper, margs_hyper = hyperpar_marginals(ctx, grid)
    diag = diagnostics(ctx, grid, eta_means, eta_vars)

    if not model.spec.control.compute.return_marginals:
        margs_fixed = {}
        margs_random = {}
        margs_fitted = {}

    return FitResult(model=model, mode=mode, grid=grid,
                     summary_fixed=summary_fixed,
                     summary_random=summary_random,
                     summary_hyperpar=summary_hyper,
                     summary_fitted=summary_fitted,
                     marginals_fixed=margs_fixed,
                     marginals_random=margs_random,
                     marginals_hyperpar=margs_hyper,
                     marginals_fitted=margs_fitted,
                     diagnostics=diag)


def fit(model, data=None, threads: int = 1) -> FitResult:
    """Fit a latent Gaussian model.

    Accepts a bound Model, or a model description (ModelSpec or plain
    dictionary) plus a data table (DataTable or pandas DataFrame). When the
    first attempt fails to converge and the spec allows it, one hardened
    retry runs with damped Newton steps, clamped curvatures, stronger
    jitter, smaller search steps and a prior-median start; a second failure
    raises FitFailed.
    """
    if isinstance(model, dict):
        model = normalize_model(model)
    if isinstance(model, ModelSpec):
        if data is None:
            raise DataError("a data table is required to bind the model")
        model = build_model(model, data)
    elif not isinstance(model, Model):
        raise ModelSpecError(
            "fit expects a Model, a ModelSpec or a model dictionary, "
            "got %r" % type(model))
    if threads < 1:
        raise ValueError("threads must be at least 1")
    try:
        return _pipeline(model, threads, SafeOpts())
    except (NonConvergence, NotPositiveDefinite) as err:
        if not model.spec.safe:
            raise
        first_err = err
    opts = SafeOpts(damp=0.5, clamp=1e-4, jitter_mult=10.0, step_scale=0.5,
                    restart=True)
    try:
        result = _pipeline(model, threads, opts)
    except (NonConvergence, NotPositiveDefinite) as err:
        raise FitFailed(_stage_of(err), "%s (first attempt: %s)"
                        % (err, first_err)) from err
    result.safe_retry_used = True
    return result


def _stage_of(err: Exception) -> str:
    msg = str(err)
    for stage in ("mode search", "theta grid", "gaussian approximation"):
        if msg.startswith(stage):
            return stage
    return "inference"
