"""Reference implementations used to cross-check the inference engine.

Three independent routes to the same posteriors:

* ``conjugate_gaussian``: closed-form posterior and evidence for a Gaussian
  linear model with known noise precision, straight from the conjugate
  algebra.
* ``dense_grid_posterior``: for Gaussian-likelihood models, the exact
  conditional posterior at every point of a dense hyperparameter grid using
  dense linear algebra (orthonormal null-space bases for constraints, plain
  matrix inversions, a multivariate-normal marginal likelihood). No Laplace
  approximation, no sparse factorizations.
* ``metropolis_lgm``: a componentwise random-walk Metropolis sampler on the
  exact joint posterior of the latent field and the free hyperparameters,
  for models without linear constraints.

Hyperparameter bookkeeping (theta layout, priors, precision assembly) is
shared with the engine; everything downstream of the assembled precision is
computed independently here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg

from .engine import assemble_precision, family_theta2, free_indices, \
    initial_theta, log_prior_theta, stack_constraints
from .errors import ModelSpecError
from .families import ObservationAux, loglik
from .model import Model
from .priors import from_internal

__all__ = [
    "ConjugateResult",
    "conjugate_gaussian",
    "DenseGridResult",
    "dense_grid_posterior",
    "DenseLatentResult",
    "dense_latent_posterior",
    "McmcResult",
    "metropolis_lgm",
]


# ---------------------------------------------------------------------------
# conjugate Gaussian linear model
# ---------------------------------------------------------------------------

@dataclass
class ConjugateResult:
    """Exact posterior for beta | y and the exact model evidence."""

    mean: np.ndarray
    cov: np.ndarray
    evidence: float


def conjugate_gaussian(X: np.ndarray, y: np.ndarray, prior_prec,
                       noise_prec: float) -> ConjugateResult:
    """Gaussian linear model with known noise precision.

    y | beta ~ N(X beta, noise_prec^-1 I), beta ~ N(0, diag(prior_prec)^-1).
    Returns the exact posterior moments and log evidence.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    d = np.broadcast_to(np.asarray(prior_prec, dtype=np.float64), (p,))
    tau = float(noise_prec)
    P = np.diag(d) + tau * X.T @ X
    b = tau * X.T @ y
    mean = np.linalg.solve(P, b)
    cov = np.linalg.inv(P)
    sign, logdet_P = np.linalg.slogdet(P)
    if sign <= 0:
        raise ValueError("posterior precision is not positive definite")
    evidence = (-0.5 * n * math.log(2.0 * math.pi)
                + 0.5 * n * math.log(tau)
                + 0.5 * float(np.sum(np.log(d)))
                - 0.5 * logdet_P
                - 0.5 * (tau * float(y @ y) - float(b @ mean)))
    return ConjugateResult(mean=mean, cov=cov, evidence=evidence)


# ---------------------------------------------------------------------------
# dense-grid posterior for Gaussian likelihoods
# ---------------------------------------------------------------------------

@dataclass
class DenseGridResult:
    """Exact mixture posterior over a dense hyperparameter grid."""

    theta_points: np.ndarray      # (K, n_hyper) full internal vectors
    log_post: np.ndarray          # unnormalized log posterior, length K
    weights: np.ndarray           # normalized, trapezoid cell masses folded in
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    hyper_mean_internal: np.ndarray    # over the free coordinates
    hyper_mean_natural: np.ndarray
    evidence: float


def _mvn_logpdf(y: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Multivariate normal log density via slogdet, symmetrized for safety."""
    cov = 0.5 * (cov + cov.T)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise np.linalg.LinAlgError("covariance is not positive definite")
    r = y - mean
    quad = float(r @ np.linalg.solve(cov, r))
    return -0.5 * (y.size * math.log(2.0 * math.pi) + logdet + quad)


def _conditional_gaussian(model: Model, theta: np.ndarray,
                          C: Optional[np.ndarray], e: Optional[np.ndarray]):
    """Exact p(y | theta) and latent moments for a Gaussian likelihood.

    Constraints are removed by an orthonormal basis of the null space of C,
    which turns the model into an ordinary linear-Gaussian one; the marginal
    likelihood is then a single multivariate normal density.
    """
    mask = model.observed_mask
    A_o = np.asarray(model.A[mask].todense())
    y_o = model.y[mask]
    n_o = y_o.size
    N = model.layout.N
    theta2 = family_theta2(model, theta)
    tau = math.exp(theta2)

    if N == 0:
        lml = _mvn_logpdf(y_o, np.zeros(n_o), np.eye(n_o) / tau)
        return lml, np.zeros(0), np.zeros(0)

    Q = np.asarray(assemble_precision(model, theta).to_scipy().todense())
    if C is None:
        Z = np.eye(N)
        x0 = np.zeros(N)
    else:
        Z = scipy.linalg.null_space(C)
        x0 = np.linalg.lstsq(C, e, rcond=None)[0]
    Qz = Z.T @ Q @ Z
    mu_v = -np.linalg.solve(Qz, Z.T @ Q @ x0) if np.any(x0) \
        else np.zeros(Z.shape[1])
    AZ = A_o @ Z
    mean_y = A_o @ x0 + AZ @ mu_v
    cov_y = np.eye(n_o) / tau + AZ @ np.linalg.solve(Qz, AZ.T)
    lml = _mvn_logpdf(y_o, mean_y, cov_y)

    P_v = Qz + tau * AZ.T @ AZ
    b_v = Qz @ mu_v + tau * AZ.T @ (y_o - A_o @ x0)
    m_v = np.linalg.solve(P_v, b_v)
    cov_v = np.linalg.inv(P_v)
    x_mean = x0 + Z @ m_v
    x_var = np.einsum("ij,jk,ik->i", Z, cov_v, Z)
    return lml, x_mean, x_var


def dense_grid_posterior(model: Model, n_coarse: int = 61,
                         n_points: int = 201,
                         half_width: float = 12.0) -> DenseGridResult:
    """Posterior by dense numeric integration over the hyperparameters.

    Gaussian family with identity link only, at most two free
    hyperparameters. A coarse scan over [start - half_width,
    start + half_width] per free dimension locates the mass, then a fine
    uniform grid covers the region within 16 log units of the maximum.
    Conditional posteriors are exact, so the only approximation left is the
    quadrature itself.
    """
    if model.family.name != "gaussian" or model.family.link != "identity":
        raise ModelSpecError(
            "the dense-grid reference needs a gaussian family with the "
            "identity link")
    idx = free_indices(model)
    p = idx.size
    if p > 2:
        raise ModelSpecError(
            "the dense-grid reference supports at most two free "
            "hyperparameters, got %d" % p)
    C, e = stack_constraints(model)
    base = initial_theta(model)

    def eval_point(free_vals: np.ndarray):
        theta = base.copy()
        theta[idx] = free_vals
        try:
            lml, x_mean, x_var = _conditional_gaussian(model, theta, C, e)
        except np.linalg.LinAlgError:
            # numerically infeasible corner of the scan: zero posterior mass
            N = model.layout.N
            return -np.inf, theta, np.zeros(N), np.zeros(N)
        return log_prior_theta(model, theta) + lml, theta, x_mean, x_var

    if p == 0:
        lp, theta, x_mean, x_var = eval_point(np.zeros(0))
        return DenseGridResult(
            theta_points=theta[None, :], log_post=np.array([lp]),
            weights=np.array([1.0]), latent_mean=x_mean,
            latent_sd=np.sqrt(np.maximum(x_var, 0.0)),
            hyper_mean_internal=np.zeros(0), hyper_mean_natural=np.zeros(0),
            evidence=lp)

    # coarse scan to find the mass
    axes = [np.linspace(base[i] - half_width, base[i] + half_width, n_coarse)
            for i in idx]
    coarse_pts = _tensor_grid(axes)
    coarse_lp = np.array([eval_point(pt)[0] for pt in coarse_pts])
    top = float(np.max(coarse_lp))
    keep = coarse_lp > top - 16.0
    step = np.array([ax[1] - ax[0] for ax in axes])
    lo = coarse_pts[keep].min(axis=0) - step
    hi = coarse_pts[keep].max(axis=0) + step

    per_dim = n_points if p == 1 else min(n_points, 121)
    fine_axes = [np.linspace(lo[i], hi[i], per_dim) for i in range(p)]
    fine_pts = _tensor_grid(fine_axes)
    K = fine_pts.shape[0]
    N = model.layout.N
    lps = np.empty(K)
    thetas = np.empty((K, base.size))
    means = np.empty((K, N))
    varis = np.empty((K, N))
    for k, pt in enumerate(fine_pts):
        lps[k], thetas[k], means[k], varis[k] = eval_point(pt)

    # trapezoid cell masses (uniform spacing, half weight at the edges)
    log_cell = np.zeros(K)
    for i in range(p):
        h = fine_axes[i][1] - fine_axes[i][0]
        edge = (fine_pts[:, i] == fine_axes[i][0]) | \
               (fine_pts[:, i] == fine_axes[i][-1])
        log_cell += math.log(h) + np.where(edge, math.log(0.5), 0.0)

    shifted = lps + log_cell
    m = float(np.max(shifted))
    w = np.exp(shifted - m)
    evidence = m + math.log(float(np.sum(w)))
    w /= np.sum(w)

    latent_mean = w @ means
    latent_var = np.maximum(w @ (varis + means ** 2) - latent_mean ** 2, 0.0)
    hyper_mean_int = w @ thetas[:, idx]
    hyper_mean_nat = np.array([
        float(w @ np.array([from_internal(model.hypers[i].transform, t)
                            for t in thetas[:, i]]))
        for i in idx])
    return DenseGridResult(
        theta_points=thetas, log_post=lps, weights=w,
        latent_mean=latent_mean, latent_sd=np.sqrt(latent_var),
        hyper_mean_internal=hyper_mean_int, hyper_mean_natural=hyper_mean_nat,
        evidence=evidence)


def _tensor_grid(axes: List[np.ndarray]) -> np.ndarray:
    """All axis combinations, first axis slowest (row-major order)."""
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


# ---------------------------------------------------------------------------
# dense quadrature over the latent space
# ---------------------------------------------------------------------------

@dataclass
class DenseLatentResult:
    """Exact posterior moments by tensor quadrature over the latent space."""

    latent_mean: np.ndarray
    latent_sd: np.ndarray
    evidence: float
    axes: List[np.ndarray]


def dense_latent_posterior(model: Model,
                           n_points: Optional[int] = None,
                           half_width: float = 8.0) -> DenseLatentResult:
    """Brute-force posterior for a model with at most three latent elements.

    Works for any likelihood family; every hyperparameter is held at its
    initial internal value, so the target is p(x | y, theta_initial). A
    coarse scan locates the high-density region, a second-difference
    curvature estimate sets the span per axis, and the tensor-product
    trapezoid rule normalizes the posterior. No Newton step, no Gaussian
    approximation, no sparse algebra.
    """
    N = model.layout.N
    if N == 0 or N > 3:
        raise ModelSpecError(
            "the dense latent reference needs 1 to 3 latent elements, "
            "got %d" % N)
    C, _ = stack_constraints(model)
    if C is not None:
        raise ModelSpecError(
            "the dense latent reference does not support components with "
            "linear constraints")
    theta = initial_theta(model)
    theta2 = family_theta2(model, theta)
    fam = model.family
    mask = model.observed_mask
    A = np.asarray(model.A.todense())[mask]
    y = model.y[mask]
    aux = ObservationAux(E=model.aux.E[mask], Ntrials=model.aux.Ntrials[mask])
    Q = np.asarray(assemble_precision(model, theta).to_scipy().todense())
    sign, logdet_Q = np.linalg.slogdet(Q)
    if sign <= 0:
        raise ModelSpecError("latent prior precision is not positive "
                             "definite at the initial hyperparameters")
    prior_const = 0.5 * logdet_Q - 0.5 * N * math.log(2.0 * math.pi)

    def log_post(X: np.ndarray) -> np.ndarray:
        etas = X @ A.T
        ll = np.sum(loglik(fam, y, etas, theta2, aux), axis=1)
        quad = 0.5 * np.einsum("ki,ij,kj->k", X, Q, X)
        return ll + prior_const - quad

    # coarse scan to locate the mode region
    coarse = _tensor_grid([np.linspace(-12.0, 12.0, 49)] * N)
    x_hat = coarse[int(np.argmax(log_post(coarse)))].copy()
    # per-axis curvature at the located maximum sets the grid span
    sds = np.empty(N)
    step = 0.25
    f0 = float(log_post(x_hat[None, :])[0])
    for j in range(N):
        probe = np.tile(x_hat, (2, 1))
        probe[0, j] += step
        probe[1, j] -= step
        fp, fm = log_post(probe)
        curv = (fp + fm - 2.0 * f0) / step ** 2
        sds[j] = 1.0 / math.sqrt(max(-curv, 1e-8))
    if n_points is None:
        n_points = {1: 801, 2: 201, 3: 81}[N]
    axes = [np.linspace(x_hat[j] - half_width * sds[j],
                        x_hat[j] + half_width * sds[j], n_points)
            for j in range(N)]
    X = _tensor_grid(axes)
    lp = log_post(X)

    # tensor-product trapezoid weights
    wt = np.ones(1)
    log_vol = 0.0
    for ax in axes:
        w1 = np.ones(ax.size)
        w1[0] = w1[-1] = 0.5
        wt = np.outer(wt, w1).ravel()
        log_vol += math.log(ax[1] - ax[0])
    m = float(np.max(lp))
    w = np.exp(lp - m) * wt
    total = float(np.sum(w))
    evidence = m + math.log(total) + log_vol
    w /= total

    latent_mean = w @ X
    latent_var = np.maximum(w @ X ** 2 - latent_mean ** 2, 0.0)
    return DenseLatentResult(latent_mean=latent_mean,
                             latent_sd=np.sqrt(latent_var),
                             evidence=evidence, axes=axes)


# ---------------------------------------------------------------------------
# componentwise Metropolis sampler
# ---------------------------------------------------------------------------

@dataclass
class McmcResult:
    """Posterior moments estimated by the reference sampler."""

    latent_mean: np.ndarray
    latent_sd: np.ndarray
    theta_samples: np.ndarray        # kept draws of the free internal thetas
    theta_mean_internal: np.ndarray
    theta_mean_natural: np.ndarray
    accept_latent: np.ndarray
    accept_theta: np.ndarray
    n_sweeps: int
    n_kept: int


def metropolis_lgm(model: Model, n_sweeps: int = 6000, seed: int = 0,
                   burn: Optional[int] = None) -> McmcResult:
    """Componentwise random-walk Metropolis on the exact joint posterior.

    One sweep proposes an update of every latent coordinate and every free
    hyperparameter in a fixed order. Proposal scales adapt toward a 0.44
    acceptance rate during burn-in only, so the kept chain targets the exact
    posterior. Models with linear constraints are not supported (the
    constrained subspace would need specialized moves).
    """
    C, _ = stack_constraints(model)
    if C is not None:
        raise ModelSpecError(
            "the reference sampler does not support components with linear "
            "constraints; use an unconstrained model")
    if burn is None:
        burn = n_sweeps // 4

    rng = np.random.Generator(np.random.Philox(seed))
    fam = model.family
    mask = model.observed_mask
    A = model.A[mask].tocsc()
    y = model.y[mask]
    aux = ObservationAux(E=model.aux.E[mask], Ntrials=model.aux.Ntrials[mask])
    N = model.layout.N
    idx_free = free_indices(model)
    p = idx_free.size

    # per-column design slices, explicit zeros dropped
    col_rows: List[np.ndarray] = []
    col_vals: List[np.ndarray] = []
    for j in range(N):
        sl = slice(A.indptr[j], A.indptr[j + 1])
        rows = A.indices[sl]
        vals = A.data[sl]
        nz = vals != 0.0
        col_rows.append(rows[nz].copy())
        col_vals.append(vals[nz].copy())

    def aux_rows(rows):
        return ObservationAux(E=aux.E[rows], Ntrials=aux.Ntrials[rows])

    theta = initial_theta(model)
    x = np.zeros(N)
    eta = np.zeros(y.size)

    def dense_Q(th):
        Q = np.asarray(assemble_precision(model, th).to_scipy().todense())
        sign, logdet = np.linalg.slogdet(Q)
        if sign <= 0:
            raise ModelSpecError("prior precision is not positive definite; "
                                 "the sampler needs proper components only")
        return Q, logdet

    Q, logdetQ = dense_Q(theta)
    qx = Q @ x
    theta2 = family_theta2(model, theta)
    ll_row = np.asarray(loglik(fam, y, eta, theta2, aux), dtype=np.float64)
    lprior = log_prior_theta(model, theta)

    sd_x = np.full(N, 1.0)
    sd_t = np.full(p, 0.5)
    acc_x = np.zeros(N)
    acc_t = np.zeros(p)
    try_x = np.zeros(N)
    try_t = np.zeros(p)
    batch_acc_x = np.zeros(N)
    batch_acc_t = np.zeros(p)
    batch = 0

    kept_theta: List[np.ndarray] = []
    sum_x = np.zeros(N)
    sum_x2 = np.zeros(N)
    n_kept = 0

    for sweep in range(n_sweeps):
        for j in range(N):
            delta = sd_x[j] * rng.standard_normal()
            rows = col_rows[j]
            avals = col_vals[j]
            eta_new = eta[rows] + delta * avals
            ll_new = np.asarray(loglik(fam, y[rows], eta_new, theta2,
                                       aux_rows(rows)), dtype=np.float64)
            d_quad = delta * qx[j] + 0.5 * delta * delta * Q[j, j]
            log_r = float(np.sum(ll_new) - np.sum(ll_row[rows])) - d_quad
            try_x[j] += 1
            if math.log(rng.random()) < log_r:
                x[j] += delta
                eta[rows] = eta_new
                ll_row[rows] = ll_new
                qx += delta * Q[:, j]
                acc_x[j] += 1
                batch_acc_x[j] += 1
        for t_i in range(p):
            hyper_index = idx_free[t_i]
            prop = theta.copy()
            prop[hyper_index] += sd_t[t_i] * rng.standard_normal()
            try_t[t_i] += 1
            try:
                Q_new, logdet_new = dense_Q(prop)
            except ModelSpecError:
                continue
            lprior_new = log_prior_theta(model, prop)
            theta2_new = family_theta2(model, prop)
            if theta2_new != theta2:
                ll_new_full = np.asarray(loglik(fam, y, eta, theta2_new, aux),
                                         dtype=np.float64)
            else:
                ll_new_full = ll_row
            qx_new = Q_new @ x
            quad_old = float(x @ qx)
            quad_new = float(x @ qx_new)
            log_r = (lprior_new - lprior
                     + 0.5 * (logdet_new - logdetQ)
                     - 0.5 * (quad_new - quad_old)
                     + float(np.sum(ll_new_full) - np.sum(ll_row)))
            if math.log(rng.random()) < log_r:
                theta = prop
                Q, logdetQ, qx = Q_new, logdet_new, qx_new
                theta2 = theta2_new
                ll_row = ll_new_full
                lprior = lprior_new
                acc_t[t_i] += 1
                batch_acc_t[t_i] += 1

        if sweep < burn and (sweep + 1) % 50 == 0:
            batch += 1
            gain = min(0.1, 1.0 / math.sqrt(batch))
            rate_x = batch_acc_x / 50.0
            sd_x *= np.exp(np.where(rate_x > 0.44, gain, -gain))
            if p:
                rate_t = batch_acc_t / 50.0
                sd_t *= np.exp(np.where(rate_t > 0.44, gain, -gain))
            batch_acc_x[:] = 0.0
            batch_acc_t[:] = 0.0

        if sweep >= burn:
            sum_x += x
            sum_x2 += x * x
            kept_theta.append(theta[idx_free].copy())
            n_kept += 1

    latent_mean = sum_x / max(n_kept, 1)
    latent_var = np.maximum(sum_x2 / max(n_kept, 1) - latent_mean ** 2, 0.0)
    theta_samples = np.array(kept_theta) if kept_theta else np.zeros((0, p))
    theta_mean_int = theta_samples.mean(axis=0) if n_kept else np.zeros(p)
    theta_mean_nat = np.array([
        float(np.mean([from_internal(model.hypers[h].transform, v)
                       for v in theta_samples[:, c]]))
        for c, h in enumerate(idx_free)]) if n_kept and p else np.zeros(p)
    return McmcResult(
        latent_mean=latent_mean, latent_sd=np.sqrt(latent_var),
        theta_samples=theta_samples, theta_mean_internal=theta_mean_int,
        theta_mean_natural=theta_mean_nat,
        accept_latent=acc_x / np.maximum(try_x, 1.0),
        accept_theta=acc_t / np.maximum(try_t, 1.0),
        n_sweeps=n_sweeps, n_kept=n_kept)
