"""Tests for the sparse symmetric factorization stack."""

import numpy as np
import pytest
import scipy.sparse as sp

from lgmfit.errors import NotPositiveDefinite
from lgmfit.sparsela import (
    CholFactor,
    SparseSym,
    constrain_moments,
    factorize,
    minimum_degree_order,
    partial_inverse,
    sample_canonical,
    solve,
)


def random_spd(n, density, seed):
    """Sparse SPD test matrix with a random pattern."""
    rng = np.random.default_rng(seed)
    B = sp.random(n, n, density=density, random_state=rng,
                  data_rvs=lambda k: rng.normal(size=k))
    A = (B @ B.T).toarray() + n * np.eye(n)
    return A


def tridiag(n, diag=2.0, off=-1.0):
    rows, cols, vals = [], [], []
    for i in range(n):
        rows.append(i)
        cols.append(i)
        vals.append(diag)
        if i + 1 < n:
            rows.append(i + 1)
            cols.append(i)
            vals.append(off)
    return SparseSym.from_triplets(n, rows, cols, vals)


class TestSparseSym:
    def test_triplets_lower_storage_sorted(self):
        Q = tridiag(4)
        for j in range(Q.n):
            rows = Q.indices[Q.indptr[j]:Q.indptr[j + 1]]
            assert np.all(np.diff(rows) > 0)
            assert np.all(rows >= j)

    def test_triplets_either_triangle_and_duplicates(self):
        # same matrix given as upper triangle and with split duplicates
        a = SparseSym.from_triplets(2, [0, 1, 1], [0, 1, 0], [2.0, 2.0, -1.0])
        b = SparseSym.from_triplets(2, [0, 1, 0, 0], [0, 1, 1, 1],
                                    [2.0, 2.0, -0.5, -0.5])
        assert np.allclose(a.to_scipy().toarray(), b.to_scipy().toarray())

    def test_round_trip_scipy(self):
        A = random_spd(12, 0.3, seed=0)
        Q = SparseSym.from_scipy(sp.csc_matrix(A))
        assert np.allclose(Q.to_scipy().toarray(), A)
        assert np.allclose(Q.diagonal(), np.diag(A))


class TestFactorize:
    def test_tridiagonal_logdet(self):
        # det of the (2, -1) tridiagonal of size 3 is 4
        Q = tridiag(3)
        F = factorize(Q)
        assert F.logdet == pytest.approx(np.log(4.0), abs=1e-12)

    @pytest.mark.parametrize("order", ["amd", "natural"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_solve_matches_dense(self, order, seed):
        A = random_spd(25, 0.2, seed=seed)
        Q = SparseSym.from_scipy(sp.csc_matrix(A))
        F = factorize(Q, order=order)
        rng = np.random.default_rng(seed + 100)
        b = rng.normal(size=25)
        assert np.allclose(solve(F, b), np.linalg.solve(A, b), atol=1e-10)
        B = rng.normal(size=(25, 3))
        assert np.allclose(solve(F, B), np.linalg.solve(A, B), atol=1e-10)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_logdet_matches_dense(self, seed):
        A = random_spd(20, 0.25, seed=seed)
        F = factorize(SparseSym.from_scipy(sp.csc_matrix(A)))
        sign, logdet = np.linalg.slogdet(A)
        assert sign > 0
        assert F.logdet == pytest.approx(logdet, abs=1e-9)

    def test_factor_reconstructs_permuted_matrix(self):
        A = random_spd(15, 0.3, seed=3)
        Q = SparseSym.from_scipy(sp.csc_matrix(A))
        F = factorize(Q)
        L = F.L.toarray()
        App = A[np.ix_(F.perm, F.perm)]
        assert np.allclose(L @ L.T, App, atol=1e-10)

    def test_not_positive_definite(self):
        Q = SparseSym.from_triplets(2, [0, 1, 1], [0, 1, 0],
                                    [1.0, 1.0, 2.0])
        with pytest.raises(NotPositiveDefinite):
            factorize(Q)

    def test_identity_plus_rank_deficient_needs_jitter(self):
        # singular matrix raises; jittered version succeeds
        n = 5
        S = np.full((n, n), -1.0) + n * np.eye(n)  # icar-like, rank n-1
        with pytest.raises(NotPositiveDefinite):
            factorize(SparseSym.from_scipy(sp.csc_matrix(S)))
        F = factorize(SparseSym.from_scipy(sp.csc_matrix(S + 1e-5 * np.eye(n))))
        assert np.isfinite(F.logdet)


class TestOrdering:
    def test_permutation_valid_and_deterministic(self):
        A = random_spd(30, 0.15, seed=5)
        Q = SparseSym.from_scipy(sp.csc_matrix(A))
        p1 = minimum_degree_order(Q)
        p2 = minimum_degree_order(Q)
        assert np.array_equal(p1, p2)
        assert np.array_equal(np.sort(p1), np.arange(30))

    def test_arrow_matrix_fill_reduction(self):
        # dense first row/column: natural order fills completely,
        # minimum degree eliminates the hub last
        n = 20
        A = np.eye(n) * 4.0
        A[0, :] = -0.1
        A[:, 0] = -0.1
        A[0, 0] = 4.0
        Q = SparseSym.from_scipy(sp.csc_matrix(A))
        F_amd = factorize(Q, order="amd")
        F_nat = factorize(Q, order="natural")
        nnz_amd = F_amd.Li.size
        nnz_nat = F_nat.Li.size
        assert nnz_amd < nnz_nat
        assert nnz_amd == 2 * n - 1  # no fill when hub goes last


class TestPartialInverse:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_dense_inverse_on_pattern(self, seed):
        A = random_spd(18, 0.2, seed=seed)
        Q = SparseSym.from_scipy(sp.csc_matrix(A))
        F = factorize(Q)
        P = partial_inverse(F)
        Sigma = np.linalg.inv(A)
        Sigma_p = Sigma[np.ix_(F.perm, F.perm)]
        for (i, j), v in P.entries.items():
            assert v == pytest.approx(Sigma_p[i, j], abs=1e-9)
        assert np.allclose(P.diag(), np.diag(Sigma), atol=1e-9)

    def test_diag_in_original_order(self):
        A = random_spd(10, 0.4, seed=7)
        F = factorize(SparseSym.from_scipy(sp.csc_matrix(A)))
        d = partial_inverse(F).diag()
        assert np.allclose(d, np.diag(np.linalg.inv(A)), atol=1e-9)


class TestSampleCanonical:
    def test_seed_reproducibility(self):
        Q = tridiag(6)
        F = factorize(Q)
        b = np.arange(6, dtype=float)
        x1 = sample_canonical(F, b, rng=42)
        x2 = sample_canonical(F, b, rng=42)
        assert np.array_equal(x1, x2)
        x3 = sample_canonical(F, b, rng=43)
        assert not np.array_equal(x1, x3)

    def test_moments(self):
        n = 4
        A = random_spd(n, 0.9, seed=11)
        Q = SparseSym.from_scipy(sp.csc_matrix(A))
        F = factorize(Q)
        b = np.array([1.0, -0.5, 2.0, 0.0])
        mean = np.linalg.solve(A, b)
        cov = np.linalg.inv(A)
        rng = np.random.Generator(np.random.Philox(123))
        draws = np.array([sample_canonical(F, b, rng) for _ in range(20000)])
        se = np.sqrt(np.diag(cov) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 5 * se)
        emp_cov = np.cov(draws.T)
        assert np.allclose(emp_cov, cov, atol=5e-2 * np.max(np.abs(cov)) + 5e-3)


class TestConstrainMoments:
    def test_iid_sum_to_zero_variances(self):
        # unit-precision iid with a sum-to-zero constraint: var = 1 - 1/n
        n = 5
        Q = SparseSym.from_scipy(sp.eye(n, format="csc"))
        F = factorize(Q)
        C = np.ones((1, n))
        d0 = partial_inverse(F).diag()
        cm = constrain_moments(F, C, mean=np.zeros(n), diag=d0)
        assert np.allclose(cm.diag, 1.0 - 1.0 / n, atol=1e-12)
        assert np.allclose(cm.mean, 0.0, atol=1e-12)

    def test_matches_dense_conditional(self):
        n = 12
        A = random_spd(n, 0.3, seed=9)
        Q = SparseSym.from_scipy(sp.csc_matrix(A))
        F = factorize(Q)
        rng = np.random.default_rng(2)
        mean = rng.normal(size=n)
        C = np.vstack([np.ones(n), rng.normal(size=n)])
        e = np.array([0.5, -1.0])
        Sigma = np.linalg.inv(A)
        W = Sigma @ C.T
        M = C @ W
        cond_mean = mean - W @ np.linalg.solve(M, C @ mean - e)
        cond_cov = Sigma - W @ np.linalg.solve(M, W.T)
        d0 = partial_inverse(F).diag()
        cm = constrain_moments(F, C, e=e, mean=mean, diag=d0)
        assert np.allclose(cm.mean, cond_mean, atol=1e-9)
        assert np.allclose(cm.diag, np.diag(cond_cov), atol=1e-9)
        assert np.allclose(C @ cm.mean, e, atol=1e-9)

    def test_constrained_sample_satisfies_constraint(self):
        n = 8
        A = random_spd(n, 0.4, seed=13)
        F = factorize(SparseSym.from_scipy(sp.csc_matrix(A)))
        C = np.ones((1, n))
        e = np.array([0.0])
        cm = constrain_moments(F, C, e=e)
        x = sample_canonical(F, np.zeros(n), rng=7)
        xc = cm.correct_sample(x, C, e)
        assert abs(xc.sum()) < 1e-10
