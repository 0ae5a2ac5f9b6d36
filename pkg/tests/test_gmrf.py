import numpy as np
import pytest

from lgmfit.errors import DataError, ModelSpecError
from lgmfit.gmrf import (
    AdjacencyGraph,
    assemble_component_precision,
    build_component,
    component_jitter,
    compute_scaling,
    connected_components,
    icar_structure,
    read_graph,
    structure_matrix,
)
from lgmfit.sparsela import SparseSym, constrain_moments, factorize, partial_inverse


def path_graph(n):
    nbrs = [[] for _ in range(n)]
    for i in range(n - 1):
        nbrs[i].append(i + 1)
        nbrs[i + 1].append(i)
    return AdjacencyGraph(n=n, neighbors=[sorted(v) for v in nbrs])


def dense(Qs):
    return Qs.to_scipy().toarray()


def constrained_variances(Q_block, jitter, C):
    """Marginal variances through the sparse pipeline."""
    F = factorize(Q_block, jitter=jitter)
    var = partial_inverse(F).diag()
    if C is not None:
        var = constrain_moments(F, C, diag=var).diag
    return var


class TestGraphIO:
    def test_three_node_path(self, tmp_path):
        p = tmp_path / "path.graph"
        p.write_text("3\n1 1 2\n2 2 1 3\n3 1 2\n")
        g = read_graph(p)
        assert g.n == 3
        assert g.neighbors == [[1], [0, 2], [1]]
        assert g.n_edges == 2

    def test_isolated_node_allowed(self, tmp_path):
        p = tmp_path / "iso.graph"
        p.write_text("3\n1 1 2\n2 1 1\n")
        g = read_graph(p)
        assert g.neighbors == [[1], [0], []]
        assert g.n_edges == 1
        comps = connected_components(g)
        assert len(comps) == 2
        assert comps[1].tolist() == [2]

    def test_self_loop_rejected(self, tmp_path):
        p = tmp_path / "bad.graph"
        p.write_text("2\n1 2 1 2\n2 1 1\n")
        with pytest.raises(DataError):
            read_graph(p)

    def test_asymmetric_rejected(self, tmp_path):
        p = tmp_path / "bad.graph"
        p.write_text("3\n1 1 2\n2 0\n3 0\n")
        with pytest.raises(DataError):
            read_graph(p)

    def test_out_of_range_rejected(self, tmp_path):
        p = tmp_path / "bad.graph"
        p.write_text("2\n1 1 3\n2 0\n")
        with pytest.raises(DataError):
            read_graph(p)

    def test_duplicate_listing_rejected(self, tmp_path):
        p = tmp_path / "bad.graph"
        p.write_text("2\n1 1 2\n1 1 2\n")
        with pytest.raises(DataError):
            read_graph(p)

    def test_truncated_record_rejected(self, tmp_path):
        p = tmp_path / "bad.graph"
        p.write_text("3\n1 5 2\n")
        with pytest.raises(DataError):
            read_graph(p)

    def test_non_integer_rejected(self, tmp_path):
        p = tmp_path / "bad.graph"
        p.write_text("2\n1 one 2\n")
        with pytest.raises(DataError):
            read_graph(p)


class TestStructureMatrices:
    def test_iid_identity(self):
        assert np.allclose(dense(structure_matrix("iid", 4)), np.eye(4))

    def test_rw1_exact(self):
        expect = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
        assert np.allclose(dense(structure_matrix("rw1", 3)), expect)

    def test_rw2_rows(self):
        Q = dense(structure_matrix("rw2", 5))
        assert np.allclose(Q[2], [1.0, -4.0, 6.0, -4.0, 1.0])
        assert np.allclose(Q[0], [1.0, -2.0, 1.0, 0.0, 0.0])
        assert np.allclose(Q, Q.T)

    def test_cyclic_rw1_circulant(self):
        Q = dense(structure_matrix("rw1", 6, cyclic=True))
        assert np.allclose(np.diag(Q), 2.0)
        assert np.allclose(Q.sum(axis=1), 0.0)
        assert Q[0, 5] == -1.0 and Q[5, 0] == -1.0
        # every row is a rotation of the first
        for i in range(6):
            assert np.allclose(Q[i], np.roll(Q[0], i))

    def test_cyclic_rw2_rank(self):
        Q = dense(structure_matrix("rw2", 7, cyclic=True))
        assert np.allclose(Q.sum(axis=1), 0.0)
        vals = np.linalg.eigvalsh(Q)
        assert np.sum(vals < 1e-9) == 1
        # interior stencil matches the open-chain one
        assert np.allclose(Q[3, 1:6], [1.0, -4.0, 6.0, -4.0, 1.0])

    def test_rw2_rank_two(self):
        vals = np.linalg.eigvalsh(dense(structure_matrix("rw2", 8)))
        assert np.sum(vals < 1e-9) == 2

    def test_size_errors(self):
        with pytest.raises(ModelSpecError):
            structure_matrix("rw1", 1)
        with pytest.raises(ModelSpecError):
            structure_matrix("rw2", 2)
        with pytest.raises(ModelSpecError):
            structure_matrix("rw2", 4, cyclic=True)


class TestIcar:
    def test_path_of_three(self):
        expect = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
        assert np.allclose(dense(icar_structure(path_graph(3))), expect)

    def test_disconnected_nodes(self):
        g = AdjacencyGraph(n=2, neighbors=[[], []])
        Q = icar_structure(g)
        assert np.allclose(dense(Q), 0.0)
        assert len(connected_components(g)) == 2

    def test_row_sums_zero(self):
        rng = np.random.default_rng(31)
        n = 12
        nbrs = [set() for _ in range(n)]
        for _ in range(20):
            i, j = rng.integers(0, n, 2)
            if i != j:
                nbrs[i].add(int(j))
                nbrs[j].add(int(i))
        g = AdjacencyGraph(n=n, neighbors=[sorted(s) for s in nbrs])
        Q = dense(icar_structure(g))
        assert np.allclose(Q.sum(axis=1), 0.0, atol=0.0)


class TestScaling:
    def test_identity_scale_is_one(self):
        s = compute_scaling(structure_matrix("iid", 7))
        assert s == 1.0

    def test_rw1_matches_dense_oracle(self):
        m = 10
        Qs = structure_matrix("rw1", m)
        C = np.ones((1, m))
        s = compute_scaling(Qs, C)

        Qd = dense(Qs)
        jit = 1e-5 * np.mean(np.diag(Qd))
        sigma = np.linalg.inv(Qd + jit * np.eye(m))
        sc = sigma - sigma @ C.T @ np.linalg.solve(C @ sigma @ C.T, C @ sigma)
        oracle = np.exp(np.mean(np.log(np.diag(sc))))
        assert s == pytest.approx(oracle, rel=1e-6)

        # and agrees with the exact pseudo-inverse at coarser accuracy
        centered = np.linalg.pinv(Qd)
        sc2 = centered - np.outer(centered @ C.T, C @ centered) / (C @ centered @ C.T)
        exact = np.exp(np.mean(np.log(np.diag(sc2))))
        assert s == pytest.approx(exact, rel=1e-3)

    def test_scaled_structure_is_fixed_point(self):
        m = 9
        Qs = structure_matrix("rw2", m)
        C = np.vstack([np.ones(m), np.arange(m) - (m - 1) / 2.0])
        s = compute_scaling(Qs, C)
        scaled = SparseSym(n=Qs.n, indptr=Qs.indptr, indices=Qs.indices,
                           values=Qs.values * s)
        assert compute_scaling(scaled, C) == pytest.approx(1.0, abs=1e-6)

    def test_icar_with_singleton(self):
        g = AdjacencyGraph(n=4, neighbors=[[1], [0], [3], [2]])
        g.neighbors.append([])
        g.n = 5
        comps = connected_components(g)
        Qs = icar_structure(g)
        C = np.zeros((len(comps), 5))
        for k, comp in enumerate(comps):
            C[k, comp] = 1.0
        s = compute_scaling(Qs, C)
        assert np.isfinite(s) and s > 0


class TestComponents:
    def test_iid_block(self):
        cs = build_component("iid", m=4)
        Q = assemble_component_precision(cs, (2.5,))
        assert np.allclose(dense(Q), 2.5 * np.eye(4))
        assert component_jitter(cs, (2.5,)) == 0.0
        assert cs.C is None

    def test_iid_constrained(self):
        cs = build_component("iid", m=4, constr=True)
        assert cs.C.shape == (1, 4)
        assert np.allclose(cs.C, 1.0)
        assert cs.rank_def == 0

    def test_rw1_always_constrained_and_jittered(self):
        cs = build_component("rw1", m=6)
        assert cs.C.shape == (1, 6)
        tau = 3.0
        jit = component_jitter(cs, (tau,))
        assert jit == pytest.approx(1e-5 * tau * np.mean(np.diag(dense(cs.structure))))
        assert component_jitter(cs, (2 * tau,)) == pytest.approx(2 * jit)

    def test_rw1_scaled(self):
        cs = build_component("rw1", m=12, scale_model=True)
        raw = dense(structure_matrix("rw1", 12))
        assert np.allclose(dense(cs.structure), cs.scale * raw, rtol=1e-12)
        # fixed point of the scaling
        var = constrained_variances(cs.structure, component_jitter(cs, (1.0,)),
                                    cs.C)
        assert np.exp(np.mean(np.log(var))) == pytest.approx(1.0, abs=1e-6)

    def test_ar1_independence_case(self):
        cs = build_component("ar1", m=5)
        Q = assemble_component_precision(cs, (1.0, 0.0))
        assert np.allclose(dense(Q), np.eye(5))

    def test_ar1_correlation_decay(self):
        cs = build_component("ar1", m=3)
        Q = assemble_component_precision(cs, (1.0, 0.5))
        sigma = np.linalg.inv(dense(Q))
        corr12 = sigma[0, 1] / np.sqrt(sigma[0, 0] * sigma[1, 1])
        corr13 = sigma[0, 2] / np.sqrt(sigma[0, 0] * sigma[2, 2])
        assert corr12 == pytest.approx(0.5, abs=1e-10)
        assert corr13 == pytest.approx(0.25, abs=1e-10)

    def test_ar1_stationary_variances(self):
        cs = build_component("ar1", m=30)
        tau, rho = 2.5, 0.8
        Q = assemble_component_precision(cs, (tau, rho))
        sigma = np.linalg.inv(dense(Q))
        assert np.allclose(np.diag(sigma), 1.0 / tau, atol=1e-8)

    def test_ar1_domain_errors(self):
        cs = build_component("ar1", m=5)
        with pytest.raises(ModelSpecError):
            assemble_component_precision(cs, (1.0, 1.0))
        with pytest.raises(ModelSpecError):
            assemble_component_precision(cs, (-1.0, 0.5))

    def test_bym_block_layout(self):
        g = path_graph(4)
        cs = build_component("bym", graph=g)
        assert cs.size == 8 and cs.m == 4
        tv, tu = 2.0, 3.0
        Q = dense(assemble_component_precision(cs, (tv, tu)))
        assert np.allclose(Q[:4, :4], tv * np.eye(4))
        assert np.allclose(Q[:4, 4:], -tv * np.eye(4))
        R = dense(cs.structure)
        assert np.allclose(Q[4:, 4:], tv * np.eye(4) + tu * R)
        # null vector (1, 1) is annihilated
        null = np.concatenate([np.ones(4), np.ones(4)])
        assert np.allclose(Q @ null, 0.0, atol=1e-12)
        # constraint acts on the structured sub-block only
        assert np.allclose(cs.C[0, :4], 0.0)
        assert np.allclose(cs.C[0, 4:], 1.0)

    def test_bym_large_tau_v_limit(self):
        g = path_graph(6)
        cs = build_component("bym", graph=g, scale_model=True)
        theta = (1e6, 1.3)
        Q = assemble_component_precision(cs, theta)
        var = constrained_variances(Q, component_jitter(cs, theta), cs.C)
        assert np.allclose(var[:6], var[6:], atol=1e-5)

    def test_bym_matches_dense_oracle(self):
        g = path_graph(5)
        cs = build_component("bym", graph=g, scale_model=True)
        theta = (0.7, 2.2)
        Q = assemble_component_precision(cs, theta)
        jit = component_jitter(cs, theta)
        var = constrained_variances(Q, jit, cs.C)

        Qd = dense(Q) + jit * np.eye(10)
        sigma = np.linalg.inv(Qd)
        C = cs.C
        sc = sigma - sigma @ C.T @ np.linalg.solve(C @ sigma @ C.T, C @ sigma)
        assert np.allclose(var, np.diag(sc), atol=1e-9)

    def test_bym2_phi_limits(self):
        g = path_graph(6)
        cs = build_component("bym2", graph=g)
        tau = 1.7

        # phi -> 0: the combined effect is pure unstructured noise, sd sigma
        theta = (tau, 1e-8)
        Q = assemble_component_precision(cs, theta)
        var = constrained_variances(Q, component_jitter(cs, theta), cs.C)
        assert np.allclose(var[:6], 1.0 / tau, atol=1e-6)

        # phi -> 1: the combined effect matches the scaled structured part
        theta = (tau, 1.0 - 1e-6)
        Q = assemble_component_precision(cs, theta)
        var = constrained_variances(Q, component_jitter(cs, theta), cs.C)
        icar_var = constrained_variances(
            cs.structure, component_jitter(cs, theta), np.ones((1, 6)))
        assert np.allclose(var[:6], icar_var / tau, rtol=5e-5)

    def test_bym2_spectrum_present(self):
        g = path_graph(5)
        cs = build_component("bym2", graph=g)
        assert cs.spectrum is not None
        assert cs.spectrum.size == 4
        assert np.all(cs.spectrum > 0)
        # spectrum of the scaled structure covariance on its range
        vals = np.linalg.eigvalsh(dense(cs.structure))
        assert np.allclose(np.sort(cs.spectrum), np.sort(1.0 / vals[1:]), rtol=1e-9)

    def test_bym2_domain_errors(self):
        g = path_graph(4)
        cs = build_component("bym2", graph=g)
        with pytest.raises(ModelSpecError):
            assemble_component_precision(cs, (1.0, 1.0))
        with pytest.raises(ModelSpecError):
            assemble_component_precision(cs, (1.0, 0.0))

    def test_generic0(self):
        Q_user = structure_matrix("iid", 3)
        cs = build_component("generic0", Q_user=Q_user)
        Q = assemble_component_precision(cs, (4.0,))
        assert np.allclose(dense(Q), 4.0 * np.eye(3))
        assert cs.C is None
        cs2 = build_component("generic0", Q_user=Q_user, constr=True)
        assert cs2.C.shape == (1, 3)

    def test_build_errors(self):
        with pytest.raises(ModelSpecError):
            build_component("besag", m=5)
        with pytest.raises(ModelSpecError):
            build_component("iid", m=5, cyclic=True)
        with pytest.raises(ModelSpecError):
            build_component("iid", m=5, scale_model=True)
        with pytest.raises(ModelSpecError):
            build_component("ar1", m=5, scale_model=True)
        with pytest.raises(ModelSpecError):
            build_component("bym", m=5)
        with pytest.raises(ModelSpecError):
            build_component("bym", graph=path_graph(4), m=5)
        with pytest.raises(ModelSpecError):
            build_component("generic0")
