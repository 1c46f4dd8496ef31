import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gesm.graph import (CsrMatrix, DimensionError, NormalizationError, WalkDistribution,
                        add_self_loops, column_normalize, spmm, transition_matrix, walk, walk_step)

from conftest import csr_from_edges, graphs
from oracles import a_hat, dense_adjacency


def test_csr_invariants_enforced():
    with pytest.raises(ValueError):
        CsrMatrix(2, 2, np.array([0, 2, 1]), np.array([0, 1]), np.ones(2))
    with pytest.raises(ValueError):
        CsrMatrix(1, 2, np.array([0, 1]), np.array([2]), np.ones(1))


def test_from_coo_is_canonical():
    S = CsrMatrix.from_coo([1, 0, 1, 0], [0, 1, 0, 0], [1.0, 2.0, 3.0, 4.0], (2, 2))
    assert S.row_offsets.tolist() == [0, 2, 3]
    assert S.col_indices.tolist() == [0, 1, 0]
    assert S.values.tolist() == [4.0, 2.0, 4.0]  # duplicates summed


class TestAddSelfLoops:
    def test_two_nodes(self):
        A = csr_from_edges(2, [(0, 1)])
        out = add_self_loops(A)
        assert out.to_dense().tolist() == [[1, 1], [1, 1]]

    def test_single_isolated_node(self):
        A = CsrMatrix.from_coo([], [], [], (1, 1))
        assert add_self_loops(A).to_dense().tolist() == [[1.0]]

    def test_triangle(self):
        out = add_self_loops(csr_from_edges(3, [(0, 1), (1, 2), (0, 2)]))
        assert out.nnz == 9
        assert np.all(out.values == 1)

    def test_existing_diagonal_stays_one(self):
        A = CsrMatrix.from_coo([0, 0, 1], [0, 1, 0], [1.0, 1.0, 1.0], (2, 2))
        assert add_self_loops(A).to_dense().tolist() == [[1, 1], [1, 1]]

    def test_non_square(self):
        with pytest.raises(DimensionError):
            add_self_loops(CsrMatrix.from_coo([0], [1], [1.0], (1, 2)))

    @given(graphs())
    def test_idempotent(self, g):
        n, edges = g
        once = add_self_loops(csr_from_edges(n, edges))
        twice = add_self_loops(once)
        assert once.same_pattern(twice)
        assert np.array_equal(once.values, twice.values)


class TestColumnNormalize:
    def test_equal_degrees(self):
        out = column_normalize(CsrMatrix.from_dense(np.ones((2, 2))))
        assert out.to_dense().tolist() == [[0.5, 0.5], [0.5, 0.5]]

    def test_identity(self):
        assert column_normalize(CsrMatrix.from_dense([[1.0]])).to_dense().tolist() == [[1.0]]

    def test_star(self):
        # center 0 with leaves 1..3: column degrees of A + I are 4, 2, 2, 2
        P = transition_matrix(csr_from_edges(4, [(0, 1), (0, 2), (0, 3)])).to_dense()
        assert np.allclose(P[:, 0], 0.25)
        for leaf in (1, 2, 3):
            col = P[:, leaf]
            assert col[0] == 0.5 and col[leaf] == 0.5
            assert np.count_nonzero(col) == 2

    def test_zero_column_detected(self):
        with pytest.raises(NormalizationError):
            column_normalize(CsrMatrix.from_coo([0], [0], [1.0], (2, 2)))

    @given(graphs())
    def test_columns_sum_to_one(self, g):
        n, edges = g
        P = transition_matrix(csr_from_edges(n, edges))
        assert np.all(np.abs(P.column_sums() - 1.0) <= 1e-12)

    @given(graphs())
    def test_pattern_preserved_and_matches_dense(self, g):
        n, edges = g
        At = add_self_loops(csr_from_edges(n, edges))
        P = column_normalize(At)
        assert P.same_pattern(At)
        assert np.allclose(P.to_dense(), a_hat(dense_adjacency(n, edges)), atol=1e-15)

    def test_without_self_loops_uses_plain_degree(self):
        P = transition_matrix(csr_from_edges(3, [(0, 1), (1, 2)]), self_loops=False).to_dense()
        assert P[1, 0] == 1.0 and P[0, 1] == 0.5 and P[2, 1] == 0.5


class TestWalk:
    def test_zero_steps_unchanged(self):
        u0 = WalkDistribution(np.array([100.0, 0, 0, 0]))
        assert walk(transition_matrix(csr_from_edges(4, [(0, 1), (1, 2)])), u0, 0) is u0

    def test_identity_transition(self):
        u = WalkDistribution(np.array([0.2, 0.3, 0.5]))
        out = walk(CsrMatrix.identity(3), u, 7)
        assert np.array_equal(out.values, u.values) and out.step == 7

    def test_two_node(self):
        P = transition_matrix(csr_from_edges(2, [(0, 1)]))
        u1 = walk_step(P, WalkDistribution(np.array([1.0, 0.0])))
        assert u1.values.tolist() == [0.5, 0.5] and u1.step == 1
        assert walk(P, u1, 5).values.tolist() == [0.5, 0.5]

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            walk_step(CsrMatrix.identity(3), WalkDistribution(np.ones(2)))

    @given(graphs(), st.integers(0, 2**31 - 1))
    def test_mass_conservation(self, g, seed):
        n, edges = g
        P = transition_matrix(csr_from_edges(n, edges))
        u = WalkDistribution(np.random.default_rng(seed).random(n) * 10)
        mass = u.mass
        for _ in range(10):
            u = walk_step(P, u)
            assert np.all(u.values >= 0)
            assert abs(u.mass - mass) <= 1e-9 * max(abs(mass), 1e-300)

    @given(st.integers(3, 20), st.integers(0, 2**31 - 1))
    def test_converges_to_dominant_eigenvector(self, n, seed):
        rng = np.random.default_rng(seed)
        # random spanning tree plus extras keeps the graph connected
        edges = [(i, int(rng.integers(0, i))) for i in range(1, n)]
        edges += [tuple(rng.integers(0, n, 2)) for _ in range(n)]
        P = transition_matrix(csr_from_edges(n, edges))

        vals, vecs = np.linalg.eig(P.to_dense())
        pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        pi = pi / pi.sum()

        u = WalkDistribution(np.eye(n)[0] * 100.0)
        prev_gap = np.inf
        for _ in range(5000):
            nxt = walk_step(P, u)
            gap = np.abs(nxt.values - u.values).sum()
            assert gap <= prev_gap + 1e-12
            prev_gap, u = gap, nxt
            if gap < 1e-6:
                break
        assert prev_gap < 1e-6
        assert np.allclose(u.values, 100.0 * pi, atol=1e-4)


class TestSpmm:
    def test_identity(self, rng):
        M = rng.standard_normal((4, 3))
        assert np.array_equal(spmm(CsrMatrix.identity(4), M), M)

    def test_half_matrix(self):
        S = CsrMatrix.from_dense(np.full((2, 2), 0.5))
        assert spmm(S, np.array([[2.0], [0.0]])).tolist() == [[1.0], [1.0]]

    def test_empty_row(self):
        S = CsrMatrix.from_coo([0], [1], [3.0], (3, 2))
        out = spmm(S, np.ones((2, 4)))
        assert np.all(out[1:] == 0) and np.all(out[0] == 3.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            spmm(CsrMatrix.identity(3), np.ones((2, 2)))

    @given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_matches_dense_product(self, r, c, k, seed):
        rng = np.random.default_rng(seed)
        D = rng.standard_normal((r, c)) * (rng.random((r, c)) < 0.3)
        M = rng.standard_normal((c, k))
        out = spmm(CsrMatrix.from_dense(D), M)
        assert np.allclose(out, D @ M, rtol=0, atol=1e-12)

    def test_row_accumulation_order(self):
        # ascending-column left fold: ((1e16 + 1) - 1e16) = 0, unlike other orders
        S = CsrMatrix.from_coo([0, 0, 0], [0, 1, 2], [1.0, 1.0, 1.0], (1, 3))
        assert spmm(S, np.array([[1e16], [1.0], [-1e16]]))[0, 0] == 0.0

    def test_transpose(self, rng):
        D = rng.standard_normal((5, 3)) * (rng.random((5, 3)) < 0.5)
        S = CsrMatrix.from_dense(D)
        assert np.array_equal(S.transpose().to_dense(), D.T)
        assert np.array_equal(S.with_values(S.values * 2).T.to_dense(), 2 * D.T)
