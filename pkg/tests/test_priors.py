import math

import numpy as np
import pytest
from scipy import integrate, stats

from lgmfit.errors import ModelSpecError
from lgmfit.priors import (
    from_internal,
    log_prior_internal,
    make_prior,
    to_internal,
)


def density(prior, transform="log", context=None):
    return lambda t: math.exp(log_prior_internal(prior, transform, t, context))


def total_mass(prior, lo=-40.0, hi=40.0, context=None, points=None):
    val, err = integrate.quad(density(prior, context=context), lo, hi,
                              points=points, limit=200)
    assert err < 1e-7
    return val


class TestTransforms:
    def test_unit_precision_maps_to_zero(self):
        assert to_internal("log", 1.0) == 0.0
        assert from_internal("log", 0.0) == 1.0

    def test_zero_correlation_maps_to_zero(self):
        assert to_internal("fisher", 0.0) == 0.0
        assert from_internal("fisher", 0.0) == 0.0

    def test_round_trips(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            tau = rng.uniform(1e-4, 1e4)
            assert from_internal("log", to_internal("log", tau)) == pytest.approx(
                tau, rel=1e-12)
            rho = rng.uniform(-0.999, 0.999)
            assert from_internal("fisher", to_internal("fisher", rho)) == pytest.approx(
                rho, rel=1e-10, abs=1e-12)
            phi = rng.uniform(0.001, 0.999)
            assert from_internal("logit", to_internal("logit", phi)) == pytest.approx(
                phi, rel=1e-12)
            v = rng.normal()
            assert from_internal("identity", to_internal("identity", v)) == v

    def test_domain_violations(self):
        with pytest.raises(ModelSpecError):
            to_internal("log", -1.0)
        with pytest.raises(ModelSpecError):
            to_internal("fisher", 1.0)
        with pytest.raises(ModelSpecError):
            to_internal("logit", 0.0)
        with pytest.raises(ModelSpecError):
            to_internal("sqrt", 1.0)


class TestValidation:
    def test_unknown_prior(self):
        with pytest.raises(ModelSpecError):
            make_prior("lognormal", [0, 1])

    def test_listed_but_unimplemented(self):
        with pytest.raises(ModelSpecError):
            make_prior("pc.dof", [10, 0.5])
        with pytest.raises(ModelSpecError):
            make_prior("betacorrelation", [0.5, 0.5])

    def test_bad_params(self):
        with pytest.raises(ModelSpecError):
            make_prior("pc.prec", [1.0])
        with pytest.raises(ModelSpecError):
            make_prior("pc.prec", [-1.0, 0.01])
        with pytest.raises(ModelSpecError):
            make_prior("pc.prec", [1.0, 1.5])
        with pytest.raises(ModelSpecError):
            make_prior("loggamma", [0.0, 1.0])
        with pytest.raises(ModelSpecError):
            make_prior("gaussian", [0.0, -2.0])
        with pytest.raises(ModelSpecError):
            make_prior("flat", [1.0])


class TestStandardPriors:
    def test_flat_is_zero(self):
        p = make_prior("flat")
        for t in [-30.0, 0.0, 7.5]:
            assert log_prior_internal(p, "log", t) == 0.0

    def test_gaussian_matches_normal_logpdf(self):
        p = make_prior("gaussian", [1.0, 4.0])
        for t in [-2.0, 0.0, 1.0, 3.0]:
            expect = stats.norm.logpdf(t, loc=1.0, scale=0.5)
            assert log_prior_internal(p, "identity", t) == pytest.approx(
                expect, abs=1e-12)

    def test_loggamma_matches_gamma_with_jacobian(self):
        a, b = 2.0, 3.0
        p = make_prior("loggamma", [a, b])
        for t in [-1.0, 0.0, 0.5]:
            tau = math.exp(t)
            expect = stats.gamma.logpdf(tau, a, scale=1.0 / b) + t
            assert log_prior_internal(p, "log", t) == pytest.approx(expect, abs=1e-10)
        assert total_mass(p) == pytest.approx(1.0, abs=1e-5)

    def test_pc_prec_rate_and_formula(self):
        p = make_prior("pc.prec", [1.0, 0.01])
        lam = -math.log(0.01)
        assert lam == pytest.approx(4.605, abs=5e-4)
        for t in [-2.0, 0.0, 4.0]:
            expect = math.log(lam / 2.0) - t / 2.0 - lam * math.exp(-t / 2.0)
            assert log_prior_internal(p, "log", t) == pytest.approx(expect, abs=1e-12)

    def test_pc_prec_normalizes(self):
        p = make_prior("pc.prec", [1.0, 0.01])
        assert total_mass(p, -60.0, 60.0) == pytest.approx(1.0, abs=1e-6)
        # the implied exponential on sigma has P(sigma > U) = alpha
        upper, _ = integrate.quad(density(p), -60.0, to_internal("log", 1.0))
        assert upper == pytest.approx(0.01, abs=1e-6)


class TestCorrelationPriors:
    def test_cor1_normalizes_and_calibrates(self):
        p = make_prior("pc.cor1", [0.9, 0.9])
        assert total_mass(p) == pytest.approx(1.0, abs=1e-5)
        theta_u = to_internal("fisher", 0.9)
        above, _ = integrate.quad(density(p), theta_u, 40.0, limit=200)
        assert above == pytest.approx(0.9, abs=1e-5)

    def test_cor1_light_tail_variant(self):
        # alpha below the uniform-limit ratio exercises the negative rate
        p = make_prior("pc.cor1", [0.9, 0.1])
        assert total_mass(p) == pytest.approx(1.0, abs=1e-5)
        theta_u = to_internal("fisher", 0.9)
        above, _ = integrate.quad(density(p), theta_u, 40.0, limit=200)
        assert above == pytest.approx(0.1, abs=1e-5)

    def test_cor0_normalizes_and_calibrates(self):
        p = make_prior("pc.cor0", [0.5, 0.1])
        assert total_mass(p, points=[0.0]) == pytest.approx(1.0, abs=1e-5)
        theta_u = to_internal("fisher", 0.5)
        above, _ = integrate.quad(density(p), theta_u, 40.0, limit=200)
        below, _ = integrate.quad(density(p), -40.0, -theta_u, limit=200)
        assert above + below == pytest.approx(0.1, abs=1e-5)

    def test_cor0_symmetric(self):
        p = make_prior("pc.cor0", [0.5, 0.1])
        for t in [0.3, 1.0, 2.5]:
            assert log_prior_internal(p, "fisher", t) == pytest.approx(
                log_prior_internal(p, "fisher", -t), abs=1e-12)


class TestMixingFractionPrior:
    gamma = (0.4, 0.9, 1.7, 3.2)

    def test_normalizes(self):
        p = make_prior("pc", [0.5, 0.5])
        assert total_mass(p, -35.0, 35.0, context=self.gamma) == pytest.approx(
            1.0, abs=1e-5)

    def test_calibration(self):
        p = make_prior("pc", [0.5, 0.5])
        theta_u = to_internal("logit", 0.5)
        below, _ = integrate.quad(density(p, context=self.gamma), -35.0, theta_u,
                                  limit=200)
        assert below == pytest.approx(0.5, abs=1e-5)

    def test_requires_spectrum(self):
        p = make_prior("pc", [0.5, 0.5])
        with pytest.raises(ModelSpecError):
            log_prior_internal(p, "logit", 0.0)


class TestTablePrior:
    def make_normal_table(self, n=41):
        xs = np.linspace(-4.0, 4.0, n)
        return make_prior("table", [xs.tolist(), stats.norm.logpdf(xs).tolist()])

    def test_matches_grid_density(self):
        p = self.make_normal_table()
        for t in [-1.5, 0.0, 0.7]:
            assert log_prior_internal(p, "identity", t) == pytest.approx(
                stats.norm.logpdf(t), abs=1e-3)

    def test_outside_grid_is_minus_inf(self):
        p = self.make_normal_table()
        assert log_prior_internal(p, "identity", 5.0) == -math.inf
        assert log_prior_internal(p, "identity", -4.001) == -math.inf

    def test_normalized_at_load(self):
        xs = np.linspace(-4.0, 4.0, 41)
        # same shape, arbitrary offset: normalization must remove it
        p = make_prior("table", [xs.tolist(), (stats.norm.logpdf(xs) + 3.7).tolist()])
        assert total_mass(p, -4.0, 4.0) == pytest.approx(1.0, abs=1e-6)

    def test_flat_list_form(self):
        xs = np.linspace(-4.0, 4.0, 11)
        flat = xs.tolist() + stats.norm.logpdf(xs).tolist()
        p = make_prior("table", flat)
        assert log_prior_internal(p, "identity", 0.0) == pytest.approx(
            stats.norm.logpdf(0.0), abs=5e-2)

    def test_bad_grids(self):
        with pytest.raises(ModelSpecError):
            make_prior("table", [[0, 1, 2], [0, 0, 0]])
        xs = [0.0, 1.0, 1.0, 2.0, 3.0]
        with pytest.raises(ModelSpecError):
            make_prior("table", [xs, [0.0] * 5])
        with pytest.raises(ModelSpecError):
            make_prior("table", [1.0, 2.0, 3.0])
