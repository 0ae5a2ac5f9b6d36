"""Latent-field building blocks.

Structure matrices for the built-in random-effect models, adjacency graphs,
variance scaling, sum-to-zero constraints, and the per-component precision
blocks assembled from natural-scale hyperparameter values.

Conventions used throughout:
- structure matrices are unit-precision (the precision hyperparameter
  multiplies them at assembly time);
- rank-deficient (intrinsic) blocks are always paired with sum-to-zero
  constraints and a diagonal jitter proportional to the mean diagonal of the
  intrinsic structure part, so factorizations and log-determinants are
  well defined;
- bym and bym2 blocks store 2m values: the combined effect b first (the part
  that enters the linear predictor), the structured part second.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError, ModelSpecError
from .sparsela import SparseSym, constrain_moments, factorize, partial_inverse

COMPONENT_KINDS = ("iid", "rw1", "rw2", "ar1", "bym", "bym2", "generic0")

# relative size of the diagonal jitter applied to intrinsic blocks
JITTER_REL = 1e-5


# ---------------------------------------------------------------------------
# adjacency graphs
# ---------------------------------------------------------------------------

@dataclass
class AdjacencyGraph:
    """Undirected graph over nodes 0..n-1 with sorted neighbor lists."""

    n: int
    neighbors: list

    @property
    def n_edges(self) -> int:
        return sum(len(nb) for nb in self.neighbors) // 2


def read_graph(path) -> AdjacencyGraph:
    """Read the node-per-line adjacency format.

    First token: node count n. Then per node: "i k j1 ... jk" with 1-based
    indices; nodes without a line are isolated. The listing must be symmetric
    and free of self-loops and duplicates.
    """
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    if not tokens:
        raise DataError("graph file is empty")
    try:
        values = [int(t) for t in tokens]
    except ValueError as err:
        raise DataError("graph file has a non-integer token: %s" % err)
    n = values[0]
    if n <= 0:
        raise DataError("graph node count must be positive")
    pos = 1
    seen = set()
    neighbors = [None] * n
    while pos < len(values):
        if pos + 1 >= len(values):
            raise DataError("graph file ends mid-record")
        node = values[pos]
        count = values[pos + 1]
        pos += 2
        if not (1 <= node <= n):
            raise DataError("graph node %d outside 1..%d" % (node, n))
        if node in seen:
            raise DataError("graph lists node %d twice" % node)
        seen.add(node)
        if count < 0 or pos + count > len(values):
            raise DataError("graph record for node %d is malformed" % node)
        nbrs = values[pos:pos + count]
        pos += count
        for j in nbrs:
            if not (1 <= j <= n):
                raise DataError(
                    "graph neighbor %d of node %d outside 1..%d" % (j, node, n))
            if j == node:
                raise DataError("graph node %d lists itself as neighbor" % node)
        if len(set(nbrs)) != len(nbrs):
            raise DataError("graph node %d lists a neighbor twice" % node)
        neighbors[node - 1] = sorted(j - 1 for j in nbrs)
    for i in range(n):
        if neighbors[i] is None:
            neighbors[i] = []
    for i in range(n):
        for j in neighbors[i]:
            if i not in neighbors[j]:
                raise DataError(
                    "graph is asymmetric: %d lists %d but not vice versa"
                    % (i + 1, j + 1))
    return AdjacencyGraph(n=n, neighbors=neighbors)


def connected_components(g: AdjacencyGraph) -> list:
    """Connected components as sorted index arrays."""
    seen = np.zeros(g.n, dtype=bool)
    comps = []
    for start in range(g.n):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        comp = []
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in g.neighbors[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(np.array(sorted(comp), dtype=np.int64))
    return comps


# ---------------------------------------------------------------------------
# structure matrices
# ---------------------------------------------------------------------------

def _from_scipy_sym(mat) -> SparseSym:
    mat = sp.coo_matrix(mat)
    # keep explicit diagonal entries even when zero
    n = mat.shape[0]
    rows = np.concatenate([mat.row, np.arange(n)])
    cols = np.concatenate([mat.col, np.arange(n)])
    vals = np.concatenate([mat.data, np.zeros(n)])
    keep = rows >= cols
    return SparseSym.from_triplets(n, rows[keep], cols[keep], vals[keep])


def structure_matrix(kind: str, m: int, cyclic: bool = False) -> SparseSym:
    """Unit-precision structure for iid and random-walk models."""
    if kind == "iid":
        if m < 1:
            raise ModelSpecError("iid needs size >= 1")
        return _from_scipy_sym(sp.eye(m))
    if kind == "rw1":
        if m < (3 if cyclic else 2):
            raise ModelSpecError("rw1 needs size >= %d" % (3 if cyclic else 2))
        D = _difference_matrix(m, cyclic)
        return _from_scipy_sym(D.T @ D)
    if kind == "rw2":
        if m < (5 if cyclic else 3):
            raise ModelSpecError("rw2 needs size >= %d" % (5 if cyclic else 3))
        D2 = _second_difference_matrix(m, cyclic)
        return _from_scipy_sym(D2.T @ D2)
    raise ModelSpecError("no structure matrix for model %r" % kind)


def _difference_matrix(m: int, cyclic: bool):
    """First differences: (m-1) x m rows (-1, 1), or m x m circular."""
    if cyclic:
        rows = np.repeat(np.arange(m), 2)
        cols = np.empty(2 * m, dtype=np.int64)
        vals = np.empty(2 * m)
        cols[0::2] = np.arange(m)
        cols[1::2] = (np.arange(m) + 1) % m
        vals[0::2] = -1.0
        vals[1::2] = 1.0
        return sp.coo_matrix((vals, (rows, cols)), shape=(m, m)).tocsr()
    rows = np.repeat(np.arange(m - 1), 2)
    cols = np.empty(2 * (m - 1), dtype=np.int64)
    vals = np.empty(2 * (m - 1))
    cols[0::2] = np.arange(m - 1)
    cols[1::2] = np.arange(1, m)
    vals[0::2] = -1.0
    vals[1::2] = 1.0
    return sp.coo_matrix((vals, (rows, cols)), shape=(m - 1, m)).tocsr()


def _second_difference_matrix(m: int, cyclic: bool):
    """Second differences: (m-2) x m rows (1, -2, 1), or m x m circular."""
    if cyclic:
        base = np.arange(m)
        rows = np.repeat(base, 3)
        cols = np.concatenate([[i, (i + 1) % m, (i + 2) % m] for i in base])
        vals = np.tile([1.0, -2.0, 1.0], m)
        return sp.coo_matrix((vals, (rows, cols)), shape=(m, m)).tocsr()
    rows = np.repeat(np.arange(m - 2), 3)
    cols = np.concatenate([[i, i + 1, i + 2] for i in range(m - 2)])
    vals = np.tile([1.0, -2.0, 1.0], m - 2)
    return sp.coo_matrix((vals, (rows, cols)), shape=(m - 2, m)).tocsr()


def structure_rank_deficiency(kind: str, cyclic: bool = False,
                              n_components: int = 1) -> int:
    if kind == "iid":
        return 0
    if kind == "rw1":
        return 1
    if kind == "rw2":
        return 1 if cyclic else 2
    if kind == "icar":
        return n_components
    raise ModelSpecError("no rank rule for %r" % kind)


def icar_structure(g: AdjacencyGraph) -> SparseSym:
    """Graph Laplacian: degree matrix minus adjacency."""
    rows = [np.arange(g.n)]
    cols = [np.arange(g.n)]
    vals = [np.array([float(len(nb)) for nb in g.neighbors])]
    for i in range(g.n):
        for j in g.neighbors[i]:
            if j < i:
                rows.append(np.array([i]))
                cols.append(np.array([j]))
                vals.append(np.array([-1.0]))
    return SparseSym.from_triplets(
        g.n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def compute_scaling(Qs: SparseSym, C=None) -> float:
    """Scaling factor s so that Qs * s has unit generalized variance.

    s is the geometric mean of the marginal variances of Qs under the given
    constraints, computed with the standard intrinsic-model jitter. Structural
    singletons (zero diagonal) are excluded from the mean; their scaled
    variance is pinned by their constraint instead.
    """
    diag = Qs.diagonal()
    constrained = C is not None and np.size(C) > 0
    jitter = JITTER_REL * float(np.mean(diag)) if constrained else 0.0
    F = factorize(Qs, jitter=jitter)
    var = partial_inverse(F).diag()
    if constrained:
        C = np.atleast_2d(np.asarray(C, dtype=float))
        cm = constrain_moments(F, C, diag=var)
        var = cm.diag
    keep = diag > 0
    if not np.any(keep):
        raise ModelSpecError("structure matrix has an all-zero diagonal")
    return float(np.exp(np.mean(np.log(var[keep]))))


def _null_space_rows(kind: str, m: int, cyclic: bool,
                     components=None) -> np.ndarray:
    """Constraint rows spanning the structure null space (for scaling)."""
    if kind == "rw2" and not cyclic:
        trend = np.arange(m, dtype=float)
        trend -= trend.mean()
        return np.vstack([np.ones(m), trend])
    if kind in ("rw1", "rw2"):
        return np.ones((1, m))
    if kind == "icar":
        rows = np.zeros((len(components), m))
        for k, comp in enumerate(components):
            rows[k, comp] = 1.0
        return rows
    raise ModelSpecError("no null-space rule for %r" % kind)


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------

@dataclass
class ComponentStructure:
    """Everything theta-independent about one latent component."""

    kind: str
    m: int                       # base dimension
    size: int                    # latent block length (2m for bym/bym2)
    structure: SparseSym | None  # scaled unit structure; None for ar1
    scale: float                 # scaling factor baked into `structure`
    rank_def: int                # of the assembled block
    C: np.ndarray | None         # model-time constraint rows on the block
    e: np.ndarray | None
    spectrum: np.ndarray | None  # positive covariance spectrum (bym2 prior)
    cyclic: bool = False
    n_comp: int = 1              # graph components (bym/bym2)
    struct_mean_diag: float = 0.0


def build_component(kind: str, m: int | None = None,
                    graph: AdjacencyGraph | None = None,
                    cyclic: bool = False, constr: bool = False,
                    scale_model: bool = False,
                    Q_user: SparseSym | None = None) -> ComponentStructure:
    """Resolve structure, scaling, constraints and rank for one component."""
    if kind not in COMPONENT_KINDS:
        raise ModelSpecError(
            "unknown model %r (choose from %s)" % (kind, ", ".join(COMPONENT_KINDS)))
    if cyclic and kind not in ("rw1", "rw2"):
        raise ModelSpecError("cyclic applies to rw1 and rw2 only")
    if scale_model and kind in ("iid", "ar1", "generic0"):
        raise ModelSpecError("scale.model does not apply to %r" % kind)

    if kind in ("iid", "rw1", "rw2"):
        if m is None or m < 1:
            raise ModelSpecError("%r needs a positive size" % kind)
        Qs = structure_matrix(kind, m, cyclic)
        rank = structure_rank_deficiency(kind, cyclic)
        scale = 1.0
        if scale_model and kind != "iid":
            null_rows = _null_space_rows(kind, m, cyclic)
            scale = compute_scaling(Qs, null_rows)
            Qs = SparseSym(n=Qs.n, indptr=Qs.indptr, indices=Qs.indices,
                           values=Qs.values * scale)
        C = e = None
        if kind == "iid":
            if constr:
                C = np.ones((1, m))
                e = np.zeros(1)
        else:
            # intrinsic: always one sum-to-zero row (the rw2 trend direction
            # stays unconstrained at model time)
            C = np.ones((1, m))
            e = np.zeros(1)
        return ComponentStructure(
            kind=kind, m=m, size=m, structure=Qs, scale=scale, rank_def=rank,
            C=C, e=e, spectrum=None, cyclic=cyclic,
            struct_mean_diag=float(np.mean(Qs.diagonal())))

    if kind == "ar1":
        if m is None or m < 2:
            raise ModelSpecError("ar1 needs size >= 2")
        C = e = None
        if constr:
            C = np.ones((1, m))
            e = np.zeros(1)
        return ComponentStructure(
            kind=kind, m=m, size=m, structure=None, scale=1.0, rank_def=0,
            C=C, e=e, spectrum=None)

    if kind in ("bym", "bym2"):
        if graph is None:
            raise ModelSpecError("%r needs an adjacency graph" % kind)
        mg = graph.n
        if m is not None and m != mg:
            raise ModelSpecError(
                "component size %d does not match graph size %d" % (m, mg))
        comps = connected_components(graph)
        R = icar_structure(graph)
        scale = 1.0
        if scale_model or kind == "bym2":
            null_rows = _null_space_rows("icar", mg, False, comps)
            scale = compute_scaling(R, null_rows)
            R = SparseSym(n=R.n, indptr=R.indptr, indices=R.indices,
                          values=R.values * scale)
        spectrum = None
        if kind == "bym2":
            spectrum = _covariance_spectrum(R)
        # sum-to-zero on the structured sub-block, one row per component
        C = np.zeros((len(comps), 2 * mg))
        for k, comp in enumerate(comps):
            C[k, mg + comp] = 1.0
        e = np.zeros(len(comps))
        return ComponentStructure(
            kind=kind, m=mg, size=2 * mg, structure=R, scale=scale,
            rank_def=len(comps), C=C, e=e, spectrum=spectrum,
            n_comp=len(comps),
            struct_mean_diag=float(np.mean(R.diagonal())))

    # generic0: a user-supplied precision structure, treated as proper
    if Q_user is None:
        raise ModelSpecError("generic0 needs a user precision matrix Q")
    mq = Q_user.n
    if m is not None and m != mq:
        raise ModelSpecError(
            "component size %d does not match Q size %d" % (m, mq))
    C = e = None
    if constr:
        C = np.ones((1, mq))
        e = np.zeros(1)
    return ComponentStructure(
        kind=kind, m=mq, size=mq, structure=Q_user, scale=1.0, rank_def=0,
        C=C, e=e, spectrum=None)


def _covariance_spectrum(R: SparseSym) -> np.ndarray:
    """Positive eigenvalues of the generalized inverse of R.

    The null space (one direction per graph component) is dropped; the
    remaining spectrum defines the mixing-fraction prior distance.
    """
    dense = R.to_scipy().toarray()
    eigvals = np.linalg.eigvalsh(dense)
    cut = 1e-9 * max(eigvals[-1], 1.0)
    positive = eigvals[eigvals > cut]
    if positive.size == 0:
        raise ModelSpecError("structure matrix has no positive spectrum")
    return 1.0 / positive


def _check_positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ModelSpecError("%s must be positive, got %r" % (name, value))
    return value


def assemble_component_precision(cs: ComponentStructure,
                                 theta) -> SparseSym:
    """Precision block for natural-scale hyperparameter values theta.

    theta per kind: iid/rw1/rw2/generic0 (tau,); ar1 (tau, rho);
    bym (tau_unstructured, tau_structured); bym2 (tau, phi).
    """
    kind = cs.kind
    if kind in ("iid", "rw1", "rw2", "generic0"):
        (tau,) = theta
        tau = _check_positive("tau", tau)
        Qs = cs.structure
        return SparseSym(n=Qs.n, indptr=Qs.indptr, indices=Qs.indices,
                         values=Qs.values * tau)
    if kind == "ar1":
        tau, rho = float(theta[0]), float(theta[1])
        tau = _check_positive("tau", tau)
        if not (-1.0 < rho < 1.0):
            raise ModelSpecError("rho must lie in (-1, 1), got %r" % rho)
        m = cs.m
        kappa = tau / (1.0 - rho * rho)
        diag = np.full(m, (1.0 + rho * rho) * kappa)
        diag[0] = diag[-1] = kappa
        rows = np.concatenate([np.arange(m), np.arange(1, m)])
        cols = np.concatenate([np.arange(m), np.arange(m - 1)])
        vals = np.concatenate([diag, np.full(m - 1, -rho * kappa)])
        return SparseSym.from_triplets(m, rows, cols, vals)
    if kind == "bym":
        tau_v, tau_u = theta
        tau_v = _check_positive("tau (unstructured)", tau_v)
        tau_u = _check_positive("tau (structured)", tau_u)
        return _mixed_block(cs, top=tau_v, off=-tau_v,
                            bottom_diag=tau_v, structure_mult=tau_u)
    if kind == "bym2":
        tau, phi = float(theta[0]), float(theta[1])
        tau = _check_positive("tau", tau)
        if not (0.0 < phi < 1.0):
            raise ModelSpecError("phi must lie in (0, 1), got %r" % phi)
        top = tau / (1.0 - phi)
        off = -np.sqrt(tau * phi) / (1.0 - phi)
        bottom = phi / (1.0 - phi)
        return _mixed_block(cs, top=top, off=off,
                            bottom_diag=bottom, structure_mult=1.0)
    raise ModelSpecError("unknown model %r" % kind)


def _mixed_block(cs: ComponentStructure, top: float, off: float,
                 bottom_diag: float, structure_mult: float) -> SparseSym:
    """2m x 2m block [[top I, off I], [off I, bottom I + mult * R]]."""
    m = cs.m
    R = cs.structure
    rows = [np.arange(m), np.arange(m, 2 * m), np.arange(m, 2 * m)]
    cols = [np.arange(m), np.arange(m), np.arange(m, 2 * m)]
    vals = [np.full(m, top), np.full(m, off), np.full(m, bottom_diag)]
    # lower triangle of R shifted into the structured block
    Rl = R.to_scipy().tocoo()
    keep = Rl.row >= Rl.col
    rows.append(Rl.row[keep] + m)
    cols.append(Rl.col[keep] + m)
    vals.append(Rl.data[keep] * structure_mult)
    return SparseSym.from_triplets(
        2 * m, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def component_jitter(cs: ComponentStructure, theta) -> float:
    """Diagonal jitter for the assembled block, zero for proper blocks.

    Proportional to the mean diagonal of the intrinsic structure part at its
    theta-scaled magnitude, so log-determinant corrections stay consistent
    across theta.
    """
    if cs.rank_def == 0:
        return 0.0
    if cs.kind in ("rw1", "rw2"):
        (tau,) = theta
        return JITTER_REL * float(tau) * cs.struct_mean_diag
    if cs.kind == "bym":
        return JITTER_REL * float(theta[1]) * cs.struct_mean_diag
    if cs.kind == "bym2":
        return JITTER_REL * cs.struct_mean_diag
    return JITTER_REL * cs.struct_mean_diag
