"""Tests for the marginal density toolkit."""

import numpy as np
import pytest
from scipy import stats

from lgmfit.errors import MarginalError
from lgmfit.marginals import (
    Marginal,
    dmarginal,
    emarginal,
    hpdmarginal,
    mmarginal,
    pmarginal,
    qmarginal,
    read_marginal_csv,
    rmarginal,
    tmarginal,
    write_marginal_csv,
    zmarginal,
)


def gaussian_marginal(mu=0.0, sd=1.0, n=75, span=6.0):
    x = np.linspace(mu - span * sd, mu + span * sd, n)
    return Marginal(x, stats.norm.pdf(x, mu, sd))


class TestConstruction:
    def test_validates_grid(self):
        with pytest.raises(MarginalError):
            Marginal([0, 1, 2, 3], [1, 1, 1, 1])          # too few points
        with pytest.raises(MarginalError):
            Marginal([0, 1, 1, 2, 3], np.ones(5) / 3.0)   # not increasing
        with pytest.raises(MarginalError):
            Marginal([0, 1, 2, 3, 4], [0.25, 0.25, -0.1, 0.25, 0.25])

    def test_validates_mass(self):
        x = np.linspace(-6, 6, 50)
        with pytest.raises(MarginalError):
            Marginal(x, 2.5 * stats.norm.pdf(x))

    def test_normalizes(self):
        x = np.linspace(-6, 6, 75)
        m = Marginal(x, 1.005 * stats.norm.pdf(x))
        assert pmarginal(6.0, m) == pytest.approx(1.0, abs=1e-12)

    def test_tail_check(self):
        x = np.linspace(-1.5, 1.5, 21)
        with pytest.raises(MarginalError):
            Marginal(x, stats.norm.pdf(x) / stats.norm.cdf(1.5))
        Marginal(x, stats.norm.pdf(x) / (stats.norm.cdf(1.5) - stats.norm.cdf(-1.5)),
                 strict_tails=False)


class TestDensityCdfQuantile:
    def test_dmarginal_matches_normal(self):
        m = gaussian_marginal()
        xs = np.linspace(-3, 3, 41)
        # 75-point grid interpolation reproduces the density to ~0.1% of peak
        assert np.allclose(dmarginal(xs, m), stats.norm.pdf(xs), rtol=2e-3, atol=2e-4)
        assert dmarginal(100.0, m) == 0.0
        assert dmarginal(-100.0, m) == 0.0

    def test_pmarginal_matches_normal(self):
        m = gaussian_marginal(mu=1.0, sd=2.0)
        qs = np.array([-3.0, -1.0, 1.0, 2.5, 5.0])
        assert np.allclose(pmarginal(qs, m), stats.norm.cdf(qs, 1.0, 2.0), atol=5e-6)
        assert pmarginal(-1e6, m) == 0.0
        assert pmarginal(1e6, m) == 1.0

    def test_qmarginal_matches_normal(self):
        m = gaussian_marginal()
        ps = np.array([0.025, 0.25, 0.5, 0.75, 0.975])
        assert np.allclose(qmarginal(ps, m), stats.norm.ppf(ps), atol=1e-4)

    def test_quantile_cdf_round_trip(self):
        m = gaussian_marginal(mu=-2.0, sd=0.5)
        for p in [0.01, 0.1, 0.5, 0.9, 0.99]:
            assert pmarginal(qmarginal(p, m), m) == pytest.approx(p, abs=1e-9)

    def test_qmarginal_rejects_bad_probability(self):
        m = gaussian_marginal()
        with pytest.raises(MarginalError):
            qmarginal(1.5, m)


class TestTransform:
    def test_exp_transform_matches_lognormal(self):
        m = gaussian_marginal(mu=0.0, sd=0.4, n=151)
        t = tmarginal(np.exp, m)
        xs = np.linspace(0.5, 2.5, 21)
        assert np.allclose(dmarginal(xs, t), stats.lognorm.pdf(xs, 0.4),
                           rtol=5e-3, atol=5e-4)
        # probability statements survive the change of variables
        assert pmarginal(1.0, t) == pytest.approx(pmarginal(0.0, m), abs=1e-5)

    def test_decreasing_transform(self):
        m = gaussian_marginal(mu=1.0, sd=0.5)
        t = tmarginal(lambda v: -v, m)
        assert emarginal(lambda v: v, t) == pytest.approx(-1.0, abs=1e-6)

    def test_non_monotone_rejected(self):
        m = gaussian_marginal()
        with pytest.raises(MarginalError):
            tmarginal(lambda v: v * v, m)


class TestExpectationSummaries:
    def test_emarginal_moments(self):
        m = gaussian_marginal(mu=2.0, sd=1.5, n=151)
        assert emarginal(lambda v: v, m) == pytest.approx(2.0, abs=1e-4)
        assert emarginal(lambda v: (v - 2.0) ** 2, m) == pytest.approx(2.25, abs=1e-3)

    def test_zmarginal(self):
        m = gaussian_marginal(mu=-1.0, sd=2.0, n=151)
        z = zmarginal(m)
        assert z["mean"] == pytest.approx(-1.0, abs=1e-4)
        assert z["sd"] == pytest.approx(2.0, abs=1e-3)
        assert z["quant0.5"] == pytest.approx(-1.0, abs=1e-4)
        assert z["quant0.025"] == pytest.approx(stats.norm.ppf(0.025, -1, 2), abs=1e-3)
        assert z["quant0.975"] == pytest.approx(stats.norm.ppf(0.975, -1, 2), abs=1e-3)
        assert sorted(z) == ["mean", "quant0.025", "quant0.5", "quant0.975", "sd"]

    def test_mmarginal_on_skewed_density(self):
        x = np.linspace(1e-9, 12, 301)
        m = Marginal(x, stats.gamma.pdf(x, a=3.0), strict_tails=False)
        assert mmarginal(m) == pytest.approx(2.0, abs=x[1] - x[0])


class TestHpd:
    def test_gaussian_hpd_is_symmetric_quantile_pair(self):
        m = gaussian_marginal(n=151)
        lo, hi = hpdmarginal(0.95, m)
        assert lo == pytest.approx(-1.959964, abs=2e-3)
        assert hi == pytest.approx(1.959964, abs=2e-3)
        mass = pmarginal(hi, m) - pmarginal(lo, m)
        assert mass == pytest.approx(0.95, abs=1e-4)

    def test_skewed_hpd_tighter_than_central(self):
        x = np.linspace(1e-9, 20, 401)
        m = Marginal(x, stats.gamma.pdf(x, a=3.0), strict_tails=False)
        lo, hi = hpdmarginal(0.9, m)
        c_lo, c_hi = qmarginal(np.array([0.05, 0.95]), m)
        assert (hi - lo) < (c_hi - c_lo)
        assert pmarginal(hi, m) - pmarginal(lo, m) == pytest.approx(0.9, abs=1e-4)

    def test_multimodal_raises(self):
        x = np.linspace(-8, 8, 201)
        d = 0.5 * stats.norm.pdf(x, -3, 0.6) + 0.5 * stats.norm.pdf(x, 3, 0.6)
        m = Marginal(x, d)
        with pytest.raises(MarginalError):
            hpdmarginal(0.5, m)


class TestSampling:
    def test_rmarginal_reproducible(self):
        m = gaussian_marginal()
        a = rmarginal(100, m, seed=5)
        b = rmarginal(100, m, seed=5)
        assert np.array_equal(a, b)

    def test_rmarginal_ks(self):
        m = gaussian_marginal(mu=0.5, sd=1.2, n=151)
        draws = rmarginal(10000, m, seed=0)
        ks = stats.kstest(draws, lambda v: stats.norm.cdf(v, 0.5, 1.2)).statistic
        assert ks < 0.02


class TestIO:
    def test_round_trip(self, tmp_path):
        m = gaussian_marginal(mu=0.3, sd=0.7)
        path = tmp_path / "marg.csv"
        write_marginal_csv(path, m)
        m2 = read_marginal_csv(path)
        assert np.allclose(m.x, m2.x)
        assert np.allclose(m.density, m2.density, atol=1e-10)
