"""Sparse symmetric linear algebra for Gaussian Markov random fields.

Implements the factorization stack used by the inference engine:

* SparseSym          lower-triangle CSC storage for symmetric matrices
* factorize          fill-reducing sparse Cholesky (up-looking, etree based)
* solve              triangular solve pair through a factor
* partial_inverse    Takahashi recursions for marginal variances
* sample_canonical   draw from a Gaussian given in canonical form
* constrain_moments  kriging correction of moments under linear constraints

The factorization is a column-oriented up-looking Cholesky driven by the
elimination tree, with a greedy minimum-degree preordering. Everything is
deterministic: orderings break ties on the smallest index and no randomized
pivoting is involved.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import NotPositiveDefinite

__all__ = [
    "SparseSym",
    "CholFactor",
    "PartialInverse",
    "ConstrainedMoments",
    "minimum_degree_order",
    "factorize",
    "solve",
    "partial_inverse",
    "sample_canonical",
    "constrain_moments",
]


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------

@dataclass
class SparseSym:
    """Symmetric sparse matrix; only the lower triangle is stored (CSC)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_triplets(cls, n: int, rows, cols, vals) -> "SparseSym":
        """Build from (i, j, v) triplets.

        Each logical entry appears once, in either triangle; duplicates are
        summed after mapping to the lower triangle (standard assembly rule).
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.shape != cols.shape or rows.shape != vals.shape:
            raise ValueError("triplet arrays must share a common shape")
        if rows.size and (rows.min() < 0 or rows.max() >= n
                          or cols.min() < 0 or cols.max() >= n):
            raise ValueError("triplet index out of range")
        upper = rows < cols
        ri = np.where(upper, cols, rows)
        ci = np.where(upper, rows, cols)
        mat = sp.coo_matrix((vals, (ri, ci)), shape=(n, n)).tocsc()
        mat.sum_duplicates()
        mat.sort_indices()
        return cls(n=n, indptr=mat.indptr.copy(), indices=mat.indices.copy(),
                   values=mat.data.copy())

    @classmethod
    def from_scipy(cls, mat) -> "SparseSym":
        """Build from a full symmetric scipy sparse (or dense) matrix."""
        m = sp.csc_matrix(mat)
        if m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        low = sp.tril(m).tocsc()
        low.sort_indices()
        low.sum_duplicates()
        return cls(n=m.shape[0], indptr=low.indptr.copy(),
                   indices=low.indices.copy(), values=low.data.copy())

    def to_scipy(self) -> sp.csc_matrix:
        """Return the full symmetric matrix as scipy CSC."""
        low = sp.csc_matrix((self.values, self.indices, self.indptr),
                            shape=(self.n, self.n))
        diag = sp.diags(low.diagonal())
        full = low + low.T - diag
        return full.tocsc()

    def diagonal(self) -> np.ndarray:
        low = sp.csc_matrix((self.values, self.indices, self.indptr),
                            shape=(self.n, self.n))
        return low.diagonal().copy()

    def nnz_lower(self) -> int:
        return int(self.indices.size)


# ---------------------------------------------------------------------------
# ordering
# ---------------------------------------------------------------------------

def minimum_degree_order(Q: Union[SparseSym, sp.spmatrix]) -> np.ndarray:
    """Greedy minimum-degree elimination order with smallest-index ties.

    Returns perm such that perm[k] is the original index eliminated at
    step k. Deterministic by construction.
    """
    A = Q.to_scipy() if isinstance(Q, SparseSym) else sp.csc_matrix(Q)
    n = A.shape[0]
    adj = [set() for _ in range(n)]
    coo = A.tocoo()
    for i, j in zip(coo.row.tolist(), coo.col.tolist()):
        if i != j:
            adj[i].add(j)
            adj[j].add(i)
    alive = np.ones(n, dtype=bool)
    heap = [(len(adj[v]), v) for v in range(n)]
    heapq.heapify(heap)
    perm = np.empty(n, dtype=np.int64)
    for k in range(n):
        while True:
            d, v = heapq.heappop(heap)
            if alive[v] and d == len(adj[v]):
                break
        perm[k] = v
        alive[v] = False
        nb = adj[v]
        for u in nb:
            au = adj[u]
            au.discard(v)
            grow = nb - au - {u}
            if grow:
                au.update(grow)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return perm


# ---------------------------------------------------------------------------
# factorization
# ---------------------------------------------------------------------------

@dataclass
class CholFactor:
    """Sparse Cholesky factor of a permuted symmetric matrix.

    L L' = Q[perm, :][:, perm], L lower triangular with the diagonal entry
    first in every column.
    """

    n: int
    perm: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Lx: np.ndarray
    logdet: float
    _L_csr: sp.csr_matrix = field(repr=False, default=None)
    _Lt_csr: sp.csr_matrix = field(repr=False, default=None)

    @property
    def L(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=(self.n, self.n))

    def _solvers(self) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
        if self._L_csr is None:
            L = self.L
            self._L_csr = L.tocsr()
            self._Lt_csr = L.T.tocsr()
        return self._L_csr, self._Lt_csr


def _etree(n: int, col_rows) -> np.ndarray:
    """Elimination tree from the upper-triangle column patterns."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for i in col_rows[k]:
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


def factorize(Q: SparseSym, order: str = "amd", jitter: float = 0.0) -> CholFactor:
    """Sparse Cholesky of a symmetric positive definite matrix.

    order: "amd" for the greedy minimum-degree preorder, "natural" for the
    identity permutation. jitter is added to every diagonal entry before
    factorizing (the way rank-deficient structures are made factorizable).
    Raises NotPositiveDefinite when a pivot is not strictly positive.
    """
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    n = Q.n
    if order == "amd":
        perm = minimum_degree_order(Q)
    elif order == "natural":
        perm = np.arange(n, dtype=np.int64)
    else:
        raise ValueError(f"unknown ordering '{order}'")

    A = Q.to_scipy()
    App = A[perm, :][:, perm].tocsc()
    App.sort_indices()

    # Upper-triangle pattern and values per column (strictly above diagonal),
    # plus the diagonal itself.
    upper_rows = []
    upper_vals = []
    diag = np.zeros(n)
    for k in range(n):
        lo, hi = App.indptr[k], App.indptr[k + 1]
        rows = App.indices[lo:hi]
        vals = App.data[lo:hi]
        mask = rows < k
        upper_rows.append(rows[mask])
        upper_vals.append(vals[mask])
        dk = vals[rows == k]
        diag[k] = (dk[0] if dk.size else 0.0) + jitter

    parent = _etree(n, upper_rows)

    col_rows = [[k] for k in range(n)]   # diagonal entry first
    col_vals = [[0.0] for _ in range(n)]
    x = np.zeros(n)
    flag = np.full(n, -1, dtype=np.int64)
    logdet = 0.0
    # pivots at rounding-noise level mean the matrix is singular in working
    # precision; treat them the same as negative pivots
    pivot_floor = 1e-12 * float(np.mean(np.abs(diag))) if n else 0.0

    for k in range(n):
        # pattern of row k of L via reach along the elimination tree
        stack = []
        flag[k] = k
        for i in upper_rows[k]:
            path = []
            while flag[i] != k:
                path.append(i)
                flag[i] = k
                i = parent[i]
            stack.extend(reversed(path))
        # 'stack' holds the row pattern in reverse topological order per leaf
        # walk; re-sort ascending, which is a valid topological order for a
        # forest with parent[i] > i.
        pattern = sorted(stack)

        for i, v in zip(upper_rows[k], upper_vals[k]):
            x[i] = v
        d = diag[k]
        for j in pattern:
            lkj = x[j] / col_vals[j][0]
            x[j] = 0.0
            rows_j = col_rows[j]
            vals_j = col_vals[j]
            for t in range(1, len(rows_j)):
                x[rows_j[t]] -= vals_j[t] * lkj
            d -= lkj * lkj
            rows_j.append(k)
            vals_j.append(lkj)
        for i in upper_rows[k]:
            x[i] = 0.0
        if d <= pivot_floor or not np.isfinite(d):
            raise NotPositiveDefinite(
                f"non-positive pivot {d:.3e} at elimination step {k}")
        ljj = np.sqrt(d)
        col_vals[k][0] = ljj
        logdet += 2.0 * np.log(ljj)

    nnz = sum(len(r) for r in col_rows)
    Lp = np.zeros(n + 1, dtype=np.int64)
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    pos = 0
    for j in range(n):
        Lp[j] = pos
        rj = col_rows[j]
        vj = col_vals[j]
        Li[pos:pos + len(rj)] = rj
        Lx[pos:pos + len(vj)] = vj
        pos += len(rj)
    Lp[n] = pos
    return CholFactor(n=n, perm=perm, Lp=Lp, Li=Li, Lx=Lx, logdet=float(logdet))


# ---------------------------------------------------------------------------
# solves and sampling
# ---------------------------------------------------------------------------

def solve(F: CholFactor, b: np.ndarray) -> np.ndarray:
    """Solve Q x = b through the factor; b may be (n,) or (n, m)."""
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    B = b.reshape(F.n, -1)
    L, Lt = F._solvers()
    Bp = B[F.perm, :]
    y = spsolve_triangular(L, Bp, lower=True)
    z = spsolve_triangular(Lt, y, lower=False)
    out = np.empty_like(z)
    out[F.perm, :] = z
    return out[:, 0] if squeeze else out


def sample_canonical(F: CholFactor, b: np.ndarray,
                     rng: Union[int, np.random.Generator]) -> np.ndarray:
    """Draw x ~ N(Q^-1 b, Q^-1) given the factor of Q.

    rng is a numpy Generator or an integer seed (Philox stream).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(int(rng)))
    mean = solve(F, b)
    z = rng.standard_normal(F.n)
    _, Lt = F._solvers()
    w = spsolve_triangular(Lt, z.reshape(-1, 1), lower=False)[:, 0]
    dev = np.empty(F.n)
    dev[F.perm] = w
    return mean + dev


# ---------------------------------------------------------------------------
# Takahashi partial inverse
# ---------------------------------------------------------------------------

@dataclass
class PartialInverse:
    """Entries of Q^-1 on the pattern of L + L', in original coordinates."""

    n: int
    perm: np.ndarray
    entries: Dict[Tuple[int, int], float]

    def diag(self) -> np.ndarray:
        """Marginal variances in the original ordering."""
        out = np.empty(self.n)
        for k in range(self.n):
            out[self.perm[k]] = self.entries[(k, k)]
        return out

    def get(self, i: int, j: int) -> Optional[float]:
        """Covariance entry for original indices (i, j) if on the pattern."""
        iperm = np.empty(self.n, dtype=np.int64)
        iperm[self.perm] = np.arange(self.n)
        a, b = int(iperm[i]), int(iperm[j])
        if a < b:
            a, b = b, a
        return self.entries.get((a, b))


def partial_inverse(F: CholFactor) -> PartialInverse:
    """Takahashi recursions: Q^-1 on the sparsity pattern of the factor."""
    n = F.n
    cols = []
    for j in range(n):
        lo, hi = F.Lp[j], F.Lp[j + 1]
        cols.append((F.Li[lo:hi], F.Lx[lo:hi]))
    sigma: Dict[Tuple[int, int], float] = {}
    for j in range(n - 1, -1, -1):
        rows, vals = cols[j]
        ljj = vals[0]
        sub_rows = rows[1:]
        sub_vals = vals[1:]
        for i in sub_rows[::-1].tolist():
            s = 0.0
            for k, lkj in zip(sub_rows.tolist(), sub_vals.tolist()):
                a, b = (k, i) if k >= i else (i, k)
                s += lkj * sigma[(a, b)]
            sigma[(i, j)] = -s / ljj
        s = 0.0
        for k, lkj in zip(sub_rows.tolist(), sub_vals.tolist()):
            s += lkj * sigma[(k, j)]
        sigma[(j, j)] = 1.0 / (ljj * ljj) - s / ljj
    return PartialInverse(n=n, perm=F.perm.copy(), entries=sigma)


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------

@dataclass
class ConstrainedMoments:
    """Kriging-corrected moments under the constraint C x = e."""

    mean: Optional[np.ndarray]
    diag: Optional[np.ndarray]
    W: np.ndarray                 # Q^-1 C', shape (n, k)
    M_cho: Tuple[np.ndarray, bool]
    logdet_M: float

    def correct_mean(self, mean: np.ndarray, C, e: np.ndarray) -> np.ndarray:
        resid = np.asarray(C @ mean).ravel() - e
        return mean - self.W @ scipy.linalg.cho_solve(self.M_cho, resid)

    def correct_sample(self, x: np.ndarray, C, e: np.ndarray) -> np.ndarray:
        return self.correct_mean(x, C, e)

    def correct_var_quad(self, wa: np.ndarray) -> float:
        """Subtract term for Var(a'x): wa = C Q^-1 a."""
        return float(wa @ scipy.linalg.cho_solve(self.M_cho, wa))


def constrain_moments(F: CholFactor, C, e: Optional[np.ndarray] = None,
                      mean: Optional[np.ndarray] = None,
                      diag: Optional[np.ndarray] = None) -> ConstrainedMoments:
    """Condition N(mean, Q^-1) on C x = e.

    C is (k, n), dense or scipy sparse, with full row rank. Returns the
    corrected mean (if given), corrected marginal variances (if the
    unconstrained diagonal is given) and the reusable kriging pieces.
    """
    C = sp.csr_matrix(C)
    k = C.shape[0]
    if e is None:
        e = np.zeros(k)
    e = np.asarray(e, dtype=np.float64).ravel()
    Ct = np.asarray(C.T.todense(), dtype=np.float64)
    W = solve(F, Ct)                       # (n, k)
    W = W.reshape(F.n, k)
    M = np.asarray(C @ W)
    M = 0.5 * (M + M.T)
    try:
        cho = scipy.linalg.cho_factor(M, lower=True)
    except scipy.linalg.LinAlgError as err:
        raise NotPositiveDefinite(f"constraint Gram matrix not PD: {err}")
    logdet_M = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
    out_mean = None
    if mean is not None:
        resid = np.asarray(C @ mean).ravel() - e
        out_mean = mean - W @ scipy.linalg.cho_solve(cho, resid)
    out_diag = None
    if diag is not None:
        V = scipy.linalg.cho_solve(cho, W.T)          # (k, n)
        corr = np.einsum("ik,ki->i", W, V)
        out_diag = diag - corr
        out_diag = np.maximum(out_diag, 0.0)
    return ConstrainedMoments(mean=out_mean, diag=out_diag, W=W,
                              M_cho=cho, logdet_M=logdet_M)
