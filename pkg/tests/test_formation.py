import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_traces
from oracles import components
from prosumer_coalitions.corrgraph import (
    CORRELATION_D1,
    CorrelationMatrix,
    correlation_matrix,
    epsilon_filter,
    to_distance_graph,
)
from prosumer_coalitions.errors import ConfigurationError, InfeasibleError
from prosumer_coalitions.formation import (
    CORRELATED,
    GREEDY,
    RANDOM,
    FormationParams,
    correlated_formation,
    greedy_formation,
    random_structure,
)
from prosumer_coalitions.market import GridPolicy, TraceStore, evaluate_aggregate
from prosumer_coalitions.powermodel import ProductionTrace


def check_structure(s, store, policy):
    seen = set()
    for ev in s.evaluations:
        assert seen.isdisjoint(ev.members)
        seen.update(ev.members)
        agg = store.coalition(ev.members).aggregate
        assert ev == evaluate_aggregate(ev.members, agg, policy)
    assert seen | set(s.unassigned) == set(store.agent_ids)
    assert seen.isdisjoint(s.unassigned)
    assert s.global_utility == pytest.approx(sum(ev.utility for ev in s.evaluations), abs=0)


def population(seed, n=24, t=400):
    """Producers with a few shared weather-like factors, so correlations vary."""
    rng = np.random.default_rng(seed)
    factors = rng.normal(size=(3, t))
    loadings = rng.normal(size=(n, 3)) * rng.uniform(0, 1.5, (n, 1))
    x = 50 + 10 * loadings @ factors + rng.normal(0, 10, (n, t))
    return TraceStore(make_traces(x))


def rho_of(store):
    return correlation_matrix([ProductionTrace(a, store.values[i]) for i, a in enumerate(store.agent_ids)])


def fixed_rho(values):
    rho = np.array(values, dtype=float)
    return CorrelationMatrix(rho, tuple(f"a{i:02d}" for i in range(len(rho))))


class TestParams:
    @pytest.mark.parametrize("kwargs", [{"n_coal": 0}, {"n_coal": 1, "k": 1}, {"n_coal": 1, "loop_max": 0},
                                        {"n_coal": 1, "beta": 0.0}, {"n_coal": 1, "beta": 1.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            FormationParams(**kwargs)


class TestGreedy:
    def test_producer_is_absorbed(self):
        rng = np.random.default_rng(0)
        x = np.vstack([rng.normal(10, 2, (3, 100)), np.full((1, 100), 4.0)])
        store = TraceStore(make_traces(x))
        r, far = 0.3, 0.9
        rho = fixed_rho([[1, r, r, r], [r, 1, r, far], [r, r, 1, far], [r, far, far, 1]])
        policy = GridPolicy(0.0, 0.1, p_max=100.0, alpha=0.0)
        s = greedy_formation(store, policy, FormationParams(1, k=3), rho=rho)
        assert s.extra["seeds"] == [["a00", "a01", "a02"]]
        assert s.coalitions == [("a00", "a01", "a02", "a03")]
        assert s.history[-1][1] - s.history[0][1] == pytest.approx(4.0 / 100.0)
        check_structure(s, store, policy)

    def test_locally_optimal_seed_unchanged(self):
        rng = np.random.default_rng(1)
        x = np.vstack([rng.normal(10, 2, (3, 100)), -np.abs(rng.normal(5, 1, (1, 100)))])
        store = TraceStore(make_traces(x))
        r = 0.3
        rho = fixed_rho([[1, r, r, r], [r, 1, r, 0.9], [r, r, 1, 0.9], [r, 0.9, 0.9, 1]])
        policy = GridPolicy(0.0, 0.1, p_max=100.0)
        s = greedy_formation(store, policy, FormationParams(1, k=3), rho=rho)
        assert s.coalitions == [("a00", "a01", "a02")]
        assert s.unassigned == ("a03",)
        assert len(s.history) == 1

    def test_infeasible(self):
        with pytest.raises(InfeasibleError):
            greedy_formation(population(0, n=8), GridPolicy(0.0, 0.2), FormationParams(3, k=3))

    @pytest.mark.parametrize("seed", range(6))
    def test_monotone_and_valid(self, seed):
        store = population(seed)
        policy = GridPolicy(400.0, 0.2, p_max=1e3, alpha=0.5)
        s = greedy_formation(store, policy, FormationParams(3, k=3))
        utilities = [h[1] for h in s.history]
        assert all(b >= a for a, b in zip(utilities, utilities[1:]))
        assert s.global_utility == pytest.approx(utilities[-1], rel=1e-12)
        assert s.global_utility >= utilities[0]
        assert [h[0] for h in s.history] == list(range(len(s.history)))
        assert s.provenance == GREEDY
        check_structure(s, store, policy)

    @pytest.mark.parametrize("seed", range(4))
    def test_seeds_are_cliques(self, seed):
        store = population(seed)
        s = greedy_formation(store, GridPolicy(0.0, 0.2), FormationParams(3, k=3))
        rho = rho_of(store)
        for clique in s.extra["seeds"]:
            idx = [store.index_of(a) for a in clique]
            sub = rho.entries[np.ix_(idx, idx)] ** 2
            assert sub[~np.eye(3, dtype=bool)].max() <= s.epsilon
        assert all(len(ev.members) >= 3 for ev in s.evaluations)

    def test_deterministic(self):
        store = population(5)
        policy = GridPolicy(300.0, 0.2, p_max=1e3, alpha=0.3)
        a = greedy_formation(store, policy, FormationParams(2, k=3))
        b = greedy_formation(store, policy, FormationParams(2, k=3))
        assert a.coalitions == b.coalitions and a.history == b.history


class TestRandom:
    def test_single_loop(self):
        store = population(0, n=10)
        s = random_structure(store, GridPolicy(0.0, 0.2), FormationParams(3, loop_max=1, seed=4))
        blocks = np.array_split(np.random.default_rng(4).permutation(10), 3)
        assert sorted(s.coalitions) == sorted(tuple(sorted(store.agent_ids[i] for i in b)) for b in blocks)
        assert sorted(len(c) for c in s.coalitions) == [3, 3, 4]
        assert s.provenance == RANDOM and s.unassigned == ()

    def test_identical_agents_keep_first(self):
        store = TraceStore(make_traces(np.tile(np.linspace(1, 2, 50), (9, 1))))
        s = random_structure(store, GridPolicy(0.0, 0.2), FormationParams(3, loop_max=20, seed=2))
        first = np.array_split(np.random.default_rng(2).permutation(9), 3)
        assert s.coalitions == [tuple(store.agent_ids[i] for i in sorted(b)) for b in first]

    def test_more_samples_never_worse(self):
        store = population(3)
        policy = GridPolicy(300.0, 0.2, p_max=1e3, alpha=0.5)
        ten = random_structure(store, policy, FormationParams(4, loop_max=10, seed=8))
        many = random_structure(store, policy, FormationParams(4, loop_max=1000, seed=8))
        assert many.global_utility >= ten.global_utility
        check_structure(many, store, policy)

    def test_too_many_coalitions(self):
        with pytest.raises(ConfigurationError):
            random_structure(population(0, n=4), GridPolicy(0.0, 0.2), FormationParams(5))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 500), n_coal=st.integers(1, 8))
    def test_balanced_partition(self, seed, n_coal):
        store = population(seed % 7, n=16, t=60)
        s = random_structure(store, GridPolicy(0.0, 0.2), FormationParams(n_coal, loop_max=5, seed=seed))
        sizes = [len(c) for c in s.coalitions]
        assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 16
        check_structure(s, store, GridPolicy(0.0, 0.2))


class TestCorrelated:
    def blocks(self, seed=0, size=4, t=300):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, t))
        rows = [a + 0.3 * rng.normal(size=t) for _ in range(size)] + [b + 0.3 * rng.normal(size=t) for _ in range(size)]
        return TraceStore(make_traces(rows))

    def test_single_coalition(self):
        store = self.blocks()
        s = correlated_formation(store, GridPolicy(0.0, 0.2), FormationParams(1, beta=0.05))
        assert s.coalitions == [store.agent_ids]
        assert s.epsilon == 1.0 and s.warning is None

    def test_all_singletons(self):
        store = self.blocks()
        s = correlated_formation(store, GridPolicy(0.0, 0.2), FormationParams(8, beta=0.05))
        assert sorted(len(c) for c in s.coalitions) == [1] * 8
        weights = to_distance_graph(rho_of(store),
            CORRELATION_D1).weights
        assert s.epsilon < weights[~np.eye(8, dtype=bool)].min()

    @pytest.mark.parametrize("seed", range(5))
    def test_two_blocks_recovered(self, seed):
        store = self.blocks(seed)
        s = correlated_formation(store, GridPolicy(0.0, 0.2), FormationParams(2, beta=0.05))
        assert sorted(s.coalitions) == [store.agent_ids[:4], store.agent_ids[4:]]
        rho = rho_of(store)
        adj = epsilon_filter(to_distance_graph(rho, CORRELATION_D1), s.epsilon).adjacency
        expected = [tuple(store.agent_ids[i] for i in c) for c in components(adj)]
        assert sorted(s.coalitions) == sorted(expected)
        assert s.provenance == CORRELATED

    def test_unreachable_count_warns(self):
        # three perfectly correlated pairs can only ever split into 1 or 3 groups
        rng = np.random.default_rng(0)
        base = rng.normal(size=(3, 100))
        store = TraceStore(make_traces(np.repeat(base, 2, axis=0)))
        s = correlated_formation(store, GridPolicy(0.0, 0.2), FormationParams(2, beta=0.1))
        assert s.warning is not None
        assert len(s.coalitions) in (1, 3)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 100), n_coal=st.integers(1, 10))
    def test_partition_invariants(self, seed, n_coal):
        store = population(seed, n=12, t=100)
        policy = GridPolicy(0.0, 0.2)
        s = correlated_formation(store, policy, FormationParams(n_coal, beta=0.1))
        assert not s.unassigned
        check_structure(s, store, policy)
        if s.warning is None:
            assert len(s.coalitions) == n_coal
