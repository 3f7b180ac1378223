"""Correlation and decorrelation graphs over agent traces.

Distances are ``d1 = 1 - rho^2`` (correlated agents are close) and
``d2 = rho^2`` (uncorrelated agents are close). An epsilon-graph keeps the
edges whose distance is at most epsilon. Seeds for coalition formation
are disjoint k-cliques of the filtered decorrelation graph.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DegenerateSeriesError, InfeasibleError

CORRELATION_D1 = "correlation_d1"
DECORRELATION_D2 = "decorrelation_d2"


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    entries: np.ndarray
    agent_index: tuple

    @property
    def n(self) -> int:
        return len(self.agent_index)


@dataclass(frozen=True, eq=False)
class DistanceGraph:
    metric_kind: str
    weights: np.ndarray
    agent_index: tuple

    @property
    def n(self) -> int:
        return len(self.agent_index)

    def distinct_weights(self) -> np.ndarray:
        iu = np.triu_indices(self.n, 1)
        return np.unique(self.weights[iu])


@dataclass(frozen=True, eq=False)
class FilteredGraph:
    source: DistanceGraph
    epsilon: float
    adjacency: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.source.n

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])


@dataclass(frozen=True)
class CliquePacking:
    k: int
    cliques: tuple  # tuples of sorted vertex indices, in packing order

    def __len__(self):
        return len(self.cliques)


def correlation_matrix(traces) -> CorrelationMatrix:
    """Pearson matrix, two-pass (centre first, then normalise)."""
    ids = tuple(t.agent_id for t in traces)
    if len(ids) < 2:
        raise DataError("need at least two traces")
    rows = [np.asarray(t.values, dtype=float) for t in traces]
    if len({len(r) for r in rows}) != 1:
        raise DataError("traces must have equal lengths")
    x = np.array(rows)
    if x.ndim != 2:
        raise DataError("traces must have equal lengths")
    if x.shape[1] < 3:
        raise DataError("traces must have at least 3 samples")
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    scale = np.abs(x).max(axis=1)
    for i, (nrm, s) in enumerate(zip(norms, scale)):
        if nrm == 0.0 or nrm <= 1e-12 * s * np.sqrt(x.shape[1]):
            raise DegenerateSeriesError(ids[i])
    unit = centered / norms[:, None]
    rho = np.clip(unit @ unit.T, -1.0, 1.0)
    rho = 0.5 * (rho + rho.T)
    np.fill_diagonal(rho, 1.0)
    rho.flags.writeable = False
    return CorrelationMatrix(rho, ids)


def to_distance_graph(m: CorrelationMatrix, kind: str) -> DistanceGraph:
    sq = m.entries**2
    if kind == CORRELATION_D1:
        w = 1.0 - sq
    elif kind == DECORRELATION_D2:
        w = sq.copy()
    else:
        raise ValueError(f"unknown metric kind {kind!r}")
    w = np.clip(w, 0.0, 1.0)
    np.fill_diagonal(w, 0.0)
    w.flags.writeable = False
    return DistanceGraph(kind, w, m.agent_index)


def epsilon_filter(g: DistanceGraph, epsilon: float) -> FilteredGraph:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon {epsilon} outside [0, 1]")
    adj = g.weights <= epsilon
    np.fill_diagonal(adj, False)
    adj.flags.writeable = False
    return FilteredGraph(g, float(epsilon), adj)


def iter_k_cliques(adjacency: np.ndarray, k: int):
    """Yield every k-clique once, as an increasing tuple of vertices.

    Ordered extension: a partial clique is only grown with vertices larger
    than its last member that are adjacent to all current members. Candidate
    sets are Python int bitsets.
    """
    n = adjacency.shape[0]
    higher = []
    for v in range(n):
        bits = 0
        for u in np.flatnonzero(adjacency[v, v + 1:]) + v + 1:
            bits |= 1 << int(u)
        higher.append(bits)

    def grow(clique, cand):
        if len(clique) == k:
            yield tuple(clique)
            return
        need = k - len(clique)
        while cand:
            if cand.bit_count() < need:
                return
            low = cand & -cand
            v = low.bit_length() - 1
            cand ^= low
            clique.append(v)
            yield from grow(clique, cand & higher[v])
            clique.pop()

    for v in range(n):
        if higher[v].bit_count() >= k - 1:
            yield from grow([v], higher[v])


def disjoint_cliques(g: FilteredGraph, k: int) -> CliquePacking:
    """Greedy packing of vertex-disjoint k-cliques.

    All k-cliques are ranked by their largest internal edge weight (ties by
    vertex tuple) and accepted in that order when they do not overlap an
    already accepted clique. Because every new clique appearing when epsilon
    grows contains an edge heavier than all previous ones, the packing at a
    larger epsilon extends the packing at a smaller one.
    """
    if k < 2:
        raise ValueError("clique size k must be >= 2")
    w = g.source.weights
    ranked = []
    for c in iter_k_cliques(np.asarray(g.adjacency), k):
        idx = np.array(c)
        ranked.append((float(w[np.ix_(idx, idx)].max()), c))
    ranked.sort()
    used: set[int] = set()
    chosen = []
    for _, c in ranked:
        if used.isdisjoint(c):
            chosen.append(c)
            used.update(c)
    return CliquePacking(k, tuple(chosen))


def epsilon_star(g2: DistanceGraph, k: int, n_coal: int) -> tuple[float, CliquePacking]:
    """Smallest observed edge weight whose filtered graph packs n_coal k-cliques.

    Binary search over the sorted distinct weights, then a check at the
    result; a linear scan is the fallback if the check fails.
    """
    if k < 2 or n_coal < 1:
        raise ValueError("need k >= 2 and n_coal >= 1")
    n = g2.n
    if n_coal * k > n:
        raise InfeasibleError(
            f"{n_coal} disjoint cliques of size {k} need {n_coal * k} agents but only {n} exist; "
            "lower k or n_coal"
        )
    candidates = g2.distinct_weights().tolist()
    cache: dict[int, CliquePacking] = {}

    def packing(i):
        if i not in cache:
            cache[i] = disjoint_cliques(epsilon_filter(g2, candidates[i]), k)
        return cache[i]

    def ok(i):
        return len(packing(i)) >= n_coal

    lo, hi = 0, len(candidates)
    while lo < hi:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid + 1
    if lo == len(candidates) or not ok(lo) or (lo > 0 and ok(lo - 1)):
        found = next((i for i in range(len(candidates)) if ok(i)), None)
        if found is None:
            raise InfeasibleError(
                f"no epsilon yields {n_coal} disjoint cliques of size {k}; lower k or n_coal"
            )
        lo = found
    return candidates[lo], packing(lo)


def write_matrix_csv(m: CorrelationMatrix, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "rho"])
        for i in range(m.n):
            for j in range(i + 1, m.n):
                w.writerow([m.agent_index[i], m.agent_index[j], repr(float(m.entries[i, j]))])


def write_edges_csv(g: FilteredGraph, path) -> None:
    ids: Sequence = g.source.agent_index
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "weight"])
        for i, j in g.edges():
            w.writerow([ids[i], ids[j], repr(float(g.source.weights[i, j]))])

