import numpy as np
import pytest

from lgmfit.errors import DataError, ModelSpecError
from lgmfit.families import (
    CURVATURE_FLOOR,
    FAMILY_NAMES,
    ObservationAux,
    get_family,
    inv_link,
    link_fun,
    loglik,
    loglik_derivs,
    validate_support,
)


def draw_case(name, rng, n=1):
    """Random valid (y, eta, theta2, aux) for one family."""
    eta = rng.uniform(-2.5, 2.5, size=n)
    theta2 = None
    aux = None
    if name == "gaussian":
        theta2 = rng.uniform(-2.0, 2.0)
        y = eta + rng.normal(size=n)
    elif name == "poisson":
        aux = ObservationAux.for_n(n, E=rng.uniform(0.5, 3.0, size=n))
        y = rng.poisson(aux.E * np.exp(eta)).astype(float)
    elif name == "binomial":
        ntr = rng.integers(1, 30, size=n)
        aux = ObservationAux.for_n(n, Ntrials=ntr)
        y = rng.binomial(ntr, 1.0 / (1.0 + np.exp(-eta))).astype(float)
    elif name == "nbinomial":
        theta2 = rng.uniform(-1.0, 2.0)
        aux = ObservationAux.for_n(n, E=rng.uniform(0.5, 3.0, size=n))
        y = rng.poisson(aux.E * np.exp(eta)).astype(float)
    elif name == "gamma":
        theta2 = rng.uniform(-1.0, 2.0)
        y = rng.gamma(2.0, np.exp(eta) / 2.0, size=n) + 1e-3
    elif name == "beta":
        theta2 = rng.uniform(0.5, 3.0)
        y = np.clip(rng.beta(2.0, 2.0, size=n), 0.02, 0.98)
    else:
        raise AssertionError(name)
    return y, eta, theta2, aux


class TestLoglikValues:
    def test_standard_normal_at_zero(self):
        fam = get_family("gaussian")
        val = loglik(fam, [0.0], [0.0], theta2=0.0)
        assert val[0] == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_poisson_zero_count_unit_mean(self):
        fam = get_family("poisson")
        val = loglik(fam, [0.0], [0.0])
        assert val[0] == pytest.approx(-1.0, abs=1e-12)

    def test_bernoulli_even_odds(self):
        fam = get_family("binomial")
        val = loglik(fam, [1.0], [0.0])
        assert val[0] == pytest.approx(np.log(0.5), abs=1e-12)

    def test_densities_integrate_to_one(self):
        # discrete families: sum over support; continuous: trapezoid
        rng = np.random.default_rng(7)
        for _ in range(5):
            eta = np.array([rng.uniform(-1.0, 1.0)])

            fam = get_family("poisson")
            ks = np.arange(0, 200, dtype=float)
            dens = np.exp([loglik(fam, [k], eta)[0] for k in ks])
            assert np.sum(dens) == pytest.approx(1.0, abs=1e-10)

            fam = get_family("nbinomial")
            dens = np.exp([loglik(fam, [k], eta, theta2=1.0)[0] for k in ks])
            assert np.sum(dens) == pytest.approx(1.0, abs=1e-8)

            fam = get_family("binomial")
            aux = ObservationAux.for_n(1, Ntrials=[12])
            dens = np.exp([loglik(fam, [k], eta, aux=aux)[0]
                           for k in np.arange(13, dtype=float)])
            assert np.sum(dens) == pytest.approx(1.0, abs=1e-10)

            fam = get_family("gamma")
            ys = np.linspace(1e-6, 60.0, 40001)
            dens = np.exp(loglik(fam, ys, np.full_like(ys, eta[0]), theta2=0.7))
            assert np.trapezoid(dens, ys) == pytest.approx(1.0, abs=1e-4)

            fam = get_family("beta")
            ys = np.linspace(1e-7, 1 - 1e-7, 20001)
            dens = np.exp(loglik(fam, ys, np.full_like(ys, eta[0]), theta2=1.5))
            assert np.trapezoid(dens, ys) == pytest.approx(1.0, abs=1e-3)

    def test_finite_over_wide_eta_range(self):
        rng = np.random.default_rng(11)
        etas = np.linspace(-30.0, 30.0, 61)
        for name in FAMILY_NAMES:
            fam = get_family(name)
            y, _, theta2, aux = draw_case(name, rng)
            for e in etas:
                v = loglik(fam, y, np.array([e]), theta2=theta2, aux=aux)
                assert np.isfinite(v).all(), (name, e)
                g, h = loglik_derivs(fam, y, np.array([e]),
                                     theta2=theta2, aux=aux)
                assert np.isfinite(g).all() and np.isfinite(h).all(), (name, e)


class TestDerivatives:
    def test_gaussian_closed_form(self):
        fam = get_family("gaussian")
        tau = np.exp(0.7)
        g, h = loglik_derivs(fam, [2.0], [0.5], theta2=0.7)
        assert g[0] == pytest.approx(tau * 1.5, rel=1e-12)
        assert h[0] == pytest.approx(tau, rel=1e-12)

    def test_poisson_example(self):
        fam = get_family("poisson")
        g, h = loglik_derivs(fam, [2.0], [0.0])
        assert g[0] == pytest.approx(1.0, abs=1e-12)
        assert h[0] == pytest.approx(1.0, abs=1e-12)

    def test_gaussian_curvature_constant_in_eta(self):
        fam = get_family("gaussian")
        etas = np.linspace(-5, 5, 11)
        _, h = loglik_derivs(fam, np.zeros(11), etas, theta2=1.3)
        assert np.allclose(h, h[0], rtol=0, atol=0)

    def test_matches_finite_differences(self):
        # gradient vs central differences of the log-density, curvature vs
        # central differences of the analytic gradient
        rng = np.random.default_rng(2024)
        step = 1e-5
        for name in FAMILY_NAMES:
            fam = get_family(name)
            for _ in range(100):
                y, eta, theta2, aux = draw_case(name, rng)
                up = loglik(fam, y, eta + step, theta2=theta2, aux=aux)
                dn = loglik(fam, y, eta - step, theta2=theta2, aux=aux)
                g_fd = (up - dn) / (2 * step)
                g, h = loglik_derivs(fam, y, eta, theta2=theta2, aux=aux)
                assert np.max(np.abs(g - g_fd)) < 1e-6, name

                gu, _ = loglik_derivs(fam, y, eta + step, theta2=theta2, aux=aux)
                gd, _ = loglik_derivs(fam, y, eta - step, theta2=theta2, aux=aux)
                h_fd = -(gu - gd) / (2 * step)
                keep = h > 2 * CURVATURE_FLOOR
                assert np.max(np.abs((h - h_fd)[keep]), initial=0.0) < 1e-6, name

    def test_curvature_floor_applies(self):
        # deep in the beta tail the observed curvature can go negative;
        # the returned value is floored instead
        fam = get_family("beta")
        _, h = loglik_derivs(fam, [0.98], [-6.0], theta2=2.0)
        assert h[0] >= CURVATURE_FLOOR


class TestLinks:
    def test_logit_midpoint(self):
        fam = get_family("binomial")
        assert link_fun(fam, [0.5])[0] == pytest.approx(0.0, abs=1e-15)

    def test_log_inverse_rate_ratio(self):
        fam = get_family("poisson")
        assert inv_link(fam, [0.237])[0] == pytest.approx(1.267, abs=5e-4)

    def test_round_trips(self):
        rng = np.random.default_rng(3)
        for name, lo, hi in [("gaussian", -5.0, 5.0),
                             ("poisson", 0.1, 20.0),
                             ("binomial", 0.01, 0.99)]:
            fam = get_family(name)
            mu = rng.uniform(lo, hi, size=20)
            back = inv_link(fam, link_fun(fam, mu))
            assert np.allclose(back, mu, rtol=1e-12, atol=1e-12)

    def test_logit_domain_violation(self):
        fam = get_family("beta")
        with pytest.raises(DataError):
            link_fun(fam, [0.0])
        with pytest.raises(DataError):
            link_fun(fam, [1.0])
        fam = get_family("gamma")
        with pytest.raises(DataError):
            link_fun(fam, [-1.0])


class TestValidation:
    def test_unknown_family(self):
        with pytest.raises(ModelSpecError):
            get_family("weibull")

    def test_non_default_link_rejected(self):
        with pytest.raises(ModelSpecError):
            get_family("gaussian", link="log")

    def test_support_violations(self):
        with pytest.raises(DataError):
            validate_support(get_family("poisson"), [-1.0])
        with pytest.raises(DataError):
            validate_support(get_family("nbinomial"), [2.5])
        aux = ObservationAux.for_n(1, Ntrials=[3])
        with pytest.raises(DataError):
            validate_support(get_family("binomial"), [4.0], aux)
        with pytest.raises(DataError):
            validate_support(get_family("gamma"), [0.0])
        with pytest.raises(DataError):
            validate_support(get_family("beta"), [1.0])
        with pytest.raises(DataError):
            loglik(get_family("poisson"), [-1.0], [0.0])

    def test_aux_validation(self):
        with pytest.raises(DataError):
            ObservationAux.for_n(2, E=[1.0, -1.0])
        with pytest.raises(DataError):
            ObservationAux.for_n(2, Ntrials=[1.0, 0.0])
        with pytest.raises(DataError):
            ObservationAux.for_n(3, E=[1.0, 2.0])

    def test_missing_hyper_rejected(self):
        with pytest.raises(ModelSpecError):
            loglik(get_family("gaussian"), [0.0], [0.0])
