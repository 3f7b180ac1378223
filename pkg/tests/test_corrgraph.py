import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_traces
from oracles import epsilon_star_scan, greedy_packing, k_cliques, pearson
from prosumer_coalitions.corrgraph import (
    CORRELATION_D1,
    DECORRELATION_D2,
    CorrelationMatrix,
    DistanceGraph,
    correlation_matrix,
    disjoint_cliques,
    epsilon_filter,
    epsilon_star,
    iter_k_cliques,
    to_distance_graph,
    write_edges_csv,
    write_matrix_csv,
)
from prosumer_coalitions.errors import DataError, DegenerateSeriesError, InfeasibleError


def graph_from(weights, kind=DECORRELATION_D2):
    w = np.array(weights, dtype=float)
    np.fill_diagonal(w, 0.0)
    return DistanceGraph(kind, w, tuple(f"v{i}" for i in range(len(w))))


def random_weights(rng, n, levels=None):
    if levels is None:
        vals = rng.random((n, n))
    else:
        vals = rng.integers(0, levels, (n, n)) / levels
    w = np.triu(vals, 1)
    return w + w.T


def matrix(rho):
    rho = np.array(rho, dtype=float)
    return CorrelationMatrix(rho, tuple(f"v{i}" for i in range(len(rho))))


class TestCorrelation:
    def test_self_and_negation(self):
        x = [1.0, 4.0, 2.0, 8.0]
        m = correlation_matrix(make_traces([x, x, [-v for v in x]]))
        assert m.entries[0, 1] == pytest.approx(1.0)
        assert m.entries[0, 2] == pytest.approx(-1.0)

    def test_hand_computed(self):
        m = correlation_matrix(make_traces([[1, 2, 3, 4], [1, 2, 3, 5]]))
        assert m.entries[0, 1] == pytest.approx(0.9827, abs=1e-4)

    def test_matches_direct_formula(self, rng):
        for _ in range(100):
            n = int(rng.integers(3, 60))
            x = rng.normal(rng.normal(0, 100), rng.uniform(0.1, 50), n)
            y = 0.3 * x + rng.normal(0, 5, n)
            m = correlation_matrix(make_traces([x, y]))
            assert abs(m.entries[0, 1] - pearson(x.tolist(), y.tolist())) <= 1e-12

    def test_structure(self, rng):
        m = correlation_matrix(make_traces(rng.normal(size=(6, 50))))
        assert np.array_equal(m.entries, m.entries.T)
        assert np.all(np.diag(m.entries) == 1.0)
        assert np.all(np.abs(m.entries) <= 1.0)
        assert m.n == 6

    def test_constant_trace_named(self):
        with pytest.raises(DegenerateSeriesError) as info:
            correlation_matrix(make_traces([[1, 2, 3], [5, 5, 5]]))
        assert info.value.agent_id == "a01"

    @pytest.mark.parametrize("rows", [[[1, 2, 3]], [[1, 2], [2, 1]], [[1, 2, 3], [1, 2, 3, 4]]])
    def test_bad_shapes(self, rows):
        with pytest.raises(DataError):
            correlation_matrix(make_traces(rows))

    def test_large_offset_is_stable(self, rng):
        base = rng.normal(size=200)
        m = correlation_matrix(make_traces([base + 1e9, base * 2 + 1e9]))
        assert m.entries[0, 1] == pytest.approx(1.0, abs=1e-6)


class TestDistances:
    def test_perfect_correlation_d1(self):
        for r in (1.0, -1.0):
            g = to_distance_graph(matrix([[1, r], [r, 1]]), CORRELATION_D1)
            assert g.weights[0, 1] == 0.0

    def test_decorrelation_d2(self):
        g = to_distance_graph(matrix([[1, 0], [0, 1]]), DECORRELATION_D2)
        assert g.weights[0, 1] == 0.0

    def test_point_six(self):
        m = matrix([[1, 0.6], [0.6, 1]])
        assert to_distance_graph(m, CORRELATION_D1).weights[0, 1] == pytest.approx(0.64)
        assert to_distance_graph(m, DECORRELATION_D2).weights[0, 1] == pytest.approx(0.36)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            to_distance_graph(matrix([[1, 0], [0, 1]]), "cosine")

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (5, 12), elements=st.floats(-1e3, 1e3)))
    def test_metrics_sum_to_one(self, x):
        try:
            m = correlation_matrix(make_traces(x))
        except DegenerateSeriesError:
            return
        d1 = to_distance_graph(m, CORRELATION_D1).weights
        d2 = to_distance_graph(m, DECORRELATION_D2).weights
        off = ~np.eye(5, dtype=bool)
        assert np.all((d1 + d2)[off] == pytest.approx(1.0, abs=1e-15))
        assert np.all((d1 >= 0) & (d1 <= 1) & (d2 >= 0) & (d2 <= 1))


class TestFilter:
    def test_complete_at_one(self, rng):
        f = epsilon_filter(graph_from(random_weights(rng, 6)), 1.0)
        assert len(f.edges()) == 15

    def test_zero_keeps_exact_zeros(self):
        w = [[0, 0.0, 0.2], [0.0, 0, 0.3], [0.2, 0.3, 0]]
        assert epsilon_filter(graph_from(w), 0.0).edges() == [(0, 1)]

    def test_three_nodes(self):
        w = [[0, 0.1, 0.5], [0.1, 0, 0.9], [0.5, 0.9, 0]]
        f = epsilon_filter(graph_from(w), 0.5)
        assert f.edges() == [(0, 1), (0, 2)]
        assert f.neighbors(0).tolist() == [1, 2]

    def test_domain(self):
        with pytest.raises(ValueError):
            epsilon_filter(graph_from([[0, 1], [1, 0]]), 1.5)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.floats(0, 1), b=st.floats(0, 1))
    def test_edges_grow_with_epsilon(self, seed, a, b):
        g = graph_from(random_weights(np.random.default_rng(seed), 8))
        lo, hi = sorted((a, b))
        assert set(epsilon_filter(g, lo).edges()) <= set(epsilon_filter(g, hi).edges())


class TestCliques:
    def test_triangle(self):
        f = epsilon_filter(graph_from(np.ones((3, 3)) * 0.5), 1.0)
        assert disjoint_cliques(f, 3).cliques == ((0, 1, 2),)

    def test_two_triangles(self):
        w = np.ones((6, 6))
        for block in ((0, 1, 2), (3, 4, 5)):
            for i in block:
                for j in block:
                    w[i, j] = 0.1
        packing = disjoint_cliques(epsilon_filter(graph_from(w), 0.5), 3)
        assert sorted(packing.cliques) == [(0, 1, 2), (3, 4, 5)]

    def test_path_has_no_triangle(self):
        w = np.ones((4, 4))
        for i in range(3):
            w[i, i + 1] = w[i + 1, i] = 0.1
        assert len(disjoint_cliques(epsilon_filter(graph_from(w), 0.5), 3)) == 0

    def test_prefers_lightest_clique(self):
        # two overlapping triangles; the lighter one must win
        w = np.ones((4, 4))
        for (i, j), v in {(0, 1): 0.2, (1, 2): 0.15, (0, 2): 0.2, (1, 3): 0.1, (2, 3): 0.1}.items():
            w[i, j] = w[j, i] = v
        packing = disjoint_cliques(epsilon_filter(graph_from(w), 0.5), 3)
        assert packing.cliques == ((1, 2, 3),)

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            disjoint_cliques(epsilon_filter(graph_from(np.zeros((3, 3))), 1.0), 1)

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_enumeration_matches_networkx(self, rng, k):
        for _ in range(10):
            adj = random_weights(rng, 14) < 0.5
            np.fill_diagonal(adj, False)
            got = list(iter_k_cliques(adj, k))
            assert len(got) == len(set(got))
            assert set(got) == k_cliques(adj, k)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(2, 4), eps=st.floats(0.1, 0.9))
    def test_packing_invariants(self, seed, k, eps):
        g = graph_from(random_weights(np.random.default_rng(seed), 12))
        f = epsilon_filter(g, eps)
        packing = disjoint_cliques(f, k)
        seen = set()
        for c in packing.cliques:
            assert len(c) == k
            assert seen.isdisjoint(c)
            seen.update(c)
            idx = np.array(c)
            assert g.weights[np.ix_(idx, idx)].max() <= eps
        assert [tuple(c) for c in greedy_packing(g.weights.tolist(), f.adjacency, k)] == list(packing.cliques)


class TestEpsilonStar:
    def test_pigeonhole(self, rng):
        with pytest.raises(InfeasibleError, match="lower k or n_coal"):
            epsilon_star(graph_from(random_weights(rng, 5)), 2, 3)

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_uniform_weights(self, k):
        w = np.full((2 * k, 2 * k), 0.37)
        eps, packing = epsilon_star(graph_from(w), k, 2)
        assert eps == 0.37
        assert len(packing) == 2

    def test_condition_tight(self, rng):
        for _ in range(20):
            g = graph_from(random_weights(rng, 12))
            eps, packing = epsilon_star(g, 3, 2)
            assert len(disjoint_cliques(epsilon_filter(g, eps), 3)) >= 2
            smaller = g.distinct_weights()
            smaller = smaller[smaller < eps]
            if len(smaller):
                assert len(disjoint_cliques(epsilon_filter(g, smaller[-1]), 3)) < 2

    def test_matches_linear_scan(self, rng):
        for _ in range(50):
            n = int(rng.integers(4, 31))
            k = int(rng.integers(2, 4))
            n_coal = int(rng.integers(1, n // k + 1))
            levels = None if rng.random() < 0.5 else int(rng.integers(2, 8))
            w = random_weights(rng, n, levels)
            oracle = epsilon_star_scan(w.tolist(), k, n_coal)
            g = graph_from(w)
            if oracle is None:
                with pytest.raises(InfeasibleError):
                    epsilon_star(g, k, n_coal)
            else:
                assert epsilon_star(g, k, n_coal)[0] == oracle

    def test_complete_graph_always_suffices(self, rng):
        g = graph_from(random_weights(rng, 12))
        eps, packing = epsilon_star(g, 3, 4)
        assert eps <= g.distinct_weights()[-1] and len(packing) == 4

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            epsilon_star(graph_from(np.zeros((4, 4))), 1, 1)


def test_transitivity_bound(rng):
    """If rho_ab > x and rho_bc > x with x above sqrt(2)/2, then rho_ac > 2x^2 - 1."""
    checked = 0
    for _ in range(200):
        common = rng.normal(size=300)
        rows = [common + rng.normal(scale=rng.uniform(0.1, 1.0), size=300) for _ in range(3)]
        m = correlation_matrix(make_traces(rows)).entries
        x = min(m[0, 1], m[1, 2]) - 1e-9
        if x > np.sqrt(2) / 2:
            assert m[0, 2] > 2 * x * x - 1
            checked += 1
    assert checked > 20


def test_dumps(tmp_path, rng):
    traces = make_traces(rng.normal(size=(3, 20)))
    m = correlation_matrix(traces)
    write_matrix_csv(m, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "i,j,rho" and len(lines) == 4
    assert float(lines[1].split(",")[2]) == m.entries[0, 1]
    write_edges_csv(epsilon_filter(to_distance_graph(m, DECORRELATION_D2), 1.0), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "i,j,weight"
