"""Coalition structure formation.

Three algorithms share one output type:

* ``greedy_formation`` seeds coalitions with disjoint k-cliques of the
  filtered decorrelation graph and grows/prunes them by marginal utility;
* ``random_structure`` keeps the best of many random balanced partitions;
* ``correlated_formation`` lowers epsilon on the correlation graph until its
  connected components number ``n_coal`` (the deliberately bad baseline).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .corrgraph import (
    CORRELATION_D1,
    DECORRELATION_D2,
    correlation_matrix,
    epsilon_filter,
    epsilon_star,
    to_distance_graph,
)
from .errors import ConfigurationError
from .market import (
    EMPIRICAL,
    GridPolicy,
    TraceStore,
    contract_values_empirical,
    evaluate_aggregate,
    utility_value,
)

log = logging.getLogger(__name__)

GREEDY = "greedy"
RANDOM = "random"
CORRELATED = "correlated"


@dataclass(frozen=True)
class FormationParams:
    n_coal: int
    k: int = 3
    loop_max: int = 1000
    beta: float = 0.05
    seed: int = 0
    mode: str = EMPIRICAL
    max_passes: int = 10_000

    def __post_init__(self):
        if self.n_coal < 1 or self.k < 2 or self.loop_max < 1 or not 0 < self.beta < 1:
            raise ConfigurationError(
                "formation needs n_coal >= 1, k >= 2, loop_max >= 1 and 0 < beta < 1"
            )

    def to_dict(self) -> dict:
        return {"n_coal": self.n_coal, "k": self.k, "loop_max": self.loop_max,
                "beta": self.beta, "seed": self.seed, "mode": self.mode}


@dataclass(frozen=True, eq=False)
class CoalitionStructure:
    evaluations: tuple  # ContractEvaluation per coalition
    unassigned: tuple
    provenance: str
    global_utility: float
    history: tuple = ()  # (iteration, global_utility, n_assigned), greedy only
    epsilon: float | None = None
    warning: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def coalitions(self) -> list[tuple]:
        return [e.members for e in self.evaluations]

    def assigned(self) -> set:
        return {a for e in self.evaluations for a in e.members}


@dataclass(frozen=True)
class _Row:
    agent_id: str
    values: np.ndarray


def _as_store(traces) -> TraceStore:
    return traces if isinstance(traces, TraceStore) else TraceStore(traces)


def _structure(store, groups, policy, mode, provenance, **kw) -> CoalitionStructure:
    evals = []
    for g in groups:
        idx = sorted(g)
        agg = store.values[idx].sum(axis=0)
        evals.append(evaluate_aggregate([store.agent_ids[i] for i in idx], agg, policy, mode))
    used = {i for g in groups for i in g}
    unassigned = tuple(a for i, a in enumerate(store.agent_ids) if i not in used)
    total = float(sum(e.utility for e in evals))
    return CoalitionStructure(tuple(evals), unassigned, provenance, total, **kw)


def _contracts(aggregates, policy, mode):
    if mode == EMPIRICAL:
        return contract_values_empirical(aggregates, policy.phi)
    return np.array([evaluate_aggregate((), a, policy, mode).p_contract for a in aggregates])


def _utilities(aggregates, sizes, policy, mode):
    """Utilities of several candidate aggregates (rows) at once."""
    return np.atleast_1d(utility_value(_contracts(aggregates, policy, mode), sizes, policy))


# ---------------------------------------------------------------------------
# Clique-seeded greedy


def greedy_formation(traces, policy: GridPolicy, params: FormationParams, rho=None) -> CoalitionStructure:
    """Grow decorrelated clique seeds by best marginal contribution.

    Each pass visits the coalitions in seed order. A coalition adds its best
    unassigned neighbour in the filtered decorrelation graph when the
    marginal utility is >= 0 (ties go to the larger resulting contract, then
    to the lowest agent index), then drops
    the single member whose removal raises its utility the most, never
    shrinking below k. Passes repeat until one changes nothing or every
    agent is assigned.
    """
    store = _as_store(traces)
    x = store.values
    n = len(store)
    if rho is None:
        rho = correlation_matrix(
            [_Row(a, x[i]) for i, a in enumerate(store.agent_ids)]
        )
    g2 = to_distance_graph(rho, DECORRELATION_D2)
    eps, packing = epsilon_star(g2, params.k, params.n_coal)
    adj = np.asarray(epsilon_filter(g2, eps).adjacency)

    seeds = packing.cliques[: params.n_coal]
    members = [list(c) for c in seeds]
    owner = np.full(n, -1)
    for c, mem in enumerate(members):
        owner[mem] = c
    aggs = [x[mem].sum(axis=0) for mem in members]
    utils = [float(u) for u in _utilities(np.array(aggs), [len(m) for m in members], policy, params.mode)]

    history = [(0, float(sum(utils)), int((owner >= 0).sum()))]

    def record():
        history.append((len(history), float(sum(utils)), int((owner >= 0).sum())))

    for _ in range(params.max_passes):
        changed = False
        for c, mem in enumerate(members):
            cand = np.flatnonzero(adj[mem].any(axis=0) & (owner == -1))
            if len(cand):
                grown = aggs[c][None, :] + x[cand]
                p_grown = _contracts(grown, policy, params.mode)
                u_grown = np.atleast_1d(utility_value(p_grown, len(mem) + 1, policy))
                delta = u_grown - utils[c]
                # ties on delta (typically all zero while still invalid) go to
                # the larger contract, then to the lowest agent index
                ties = np.flatnonzero(delta == delta.max())
                best = int(ties[np.argmax(p_grown[ties])])
                if delta[best] >= 0:
                    i = int(cand[best])
                    mem.append(i)
                    owner[i] = c
                    aggs[c] = grown[best]
                    utils[c] = float(u_grown[best])
                    changed = True
                    record()
            if len(mem) > params.k:
                mem_arr = np.array(mem)
                shrunk = aggs[c][None, :] - x[mem_arr]
                without = _utilities(shrunk, len(mem) - 1, policy, params.mode)
                delta = utils[c] - without  # marginal value of each member
                ties = np.flatnonzero(delta == delta.min())
                worst = int(ties[np.argmin(mem_arr[ties])])
                if delta[worst] < 0:
                    j = mem.pop(worst)
                    owner[j] = -1
                    aggs[c] = shrunk[worst]
                    utils[c] = float(without[worst])
                    changed = True
                    record()
        if not changed or (owner >= 0).all():
            break
    else:
        log.warning("greedy formation stopped at max_passes=%d", params.max_passes)

    return _structure(store, members, policy, params.mode, GREEDY,
                      history=tuple(history), epsilon=float(eps),
                      extra={"seeds": [[store.agent_ids[i] for i in c] for c in seeds]})


# ---------------------------------------------------------------------------
# Random structures


def random_structure(traces, policy: GridPolicy, params: FormationParams) -> CoalitionStructure:
    """Best of ``loop_max`` shuffled partitions into n_coal near-equal blocks."""
    store = _as_store(traces)
    n = len(store)
    if params.n_coal > n:
        raise ConfigurationError(f"cannot split {n} agents into {params.n_coal} coalitions")
    rng = np.random.default_rng(params.seed)
    best_blocks, best_u = None, -np.inf
    indicator = np.zeros((params.n_coal, n))
    for _ in range(params.loop_max):
        blocks = np.array_split(rng.permutation(n), params.n_coal)
        indicator[:] = 0.0
        for b, blk in enumerate(blocks):
            indicator[b, blk] = 1.0
        aggs = indicator @ store.values  # exact: quantized values
        u = float(_utilities(aggs, [len(b) for b in blocks], policy, params.mode).sum())
        if u > best_u:
            best_blocks, best_u = [blk.tolist() for blk in blocks], u
    return _structure(store, best_blocks, policy, params.mode, RANDOM)


# ---------------------------------------------------------------------------
# Correlated baseline


def _components(adj: np.ndarray) -> list[list[int]]:
    count, labels = connected_components(csr_matrix(adj), directed=False)
    groups = [np.flatnonzero(labels == c).tolist() for c in range(count)]
    return sorted(groups, key=lambda g: g[0])


def correlated_formation(traces, policy: GridPolicy, params: FormationParams, rho=None) -> CoalitionStructure:
    """Connected components of the filtered correlation graph.

    Epsilon starts at 1 and drops by beta until there are exactly n_coal
    components. When a step jumps over n_coal, the interval is rescanned
    once with step beta/10; if n_coal is still missed, the closest count is
    returned with a warning. ``policy`` is only used to score the result.
    """
    store = _as_store(traces)
    x = store.values
    if rho is None:
        rho = correlation_matrix([_Row(a, x[i]) for i, a in enumerate(store.agent_ids)])
    g1 = to_distance_graph(rho, CORRELATION_D1)
    target = params.n_coal

    def comps_at(eps):
        return _components(np.asarray(epsilon_filter(g1, max(0.0, eps)).adjacency))

    n_steps = int(np.ceil(1.0 / params.beta - 1e-9))
    seen = []  # (eps, groups)
    prev_eps = None
    found = None
    for i in range(n_steps + 1):
        eps = max(0.0, 1.0 - i * params.beta)
        groups = comps_at(eps)
        seen.append((eps, groups))
        if len(groups) == target:
            found = (eps, groups)
            break
        if len(groups) > target:
            if prev_eps is not None:
                fine = params.beta / 10.0
                for j in range(1, 10):
                    e = prev_eps - j * fine
                    g = comps_at(e)
                    seen.append((max(0.0, e), g))
                    if len(g) == target:
                        found = (max(0.0, e), g)
                        break
            break
        prev_eps = eps

    warning = None
    if found is None:
        found = min(seen, key=lambda s: (abs(len(s[1]) - target), -s[0]))
        warning = (f"no epsilon on the beta grid gives {target} components; "
                   f"returning {len(found[1])} at epsilon={found[0]:.4g}")
        log.warning(warning)
    eps, groups = found
    return _structure(store, groups, policy, params.mode, CORRELATED, epsilon=float(eps), warning=warning)

