"""Resilience of coalition structures to random agent failures.

The resilience of a coalition is the fraction of time its aggregate stays
at or above ``p_min``; a structure's resilience is the product over its
coalitions. Failures remove a random fraction ``psi`` of the population.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .market import TraceStore

DISCONNECT = "disconnect"
PRODUCTION_ONLY = "production_only"


@dataclass(frozen=True)
class FailureScenario:
    psi: float
    seed: int
    failed: frozenset


@dataclass(frozen=True, eq=False)
class ResilienceReport:
    provenance: str
    p_min: float
    psi_grid: tuple
    values: np.ndarray  # (n_psi, replicates) structure resilience
    coalition_values: np.ndarray  # (n_psi, replicates, n_coalitions)

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=1)

    @property
    def std(self) -> np.ndarray:
        return self.values.std(axis=1)


def n_failed(psi: float, n: int) -> int:
    """round(psi * n) with halves rounded up."""
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"psi {psi} outside [0, 1]")
    return min(n, int(math.floor(psi * n + 0.5 + 1e-9)))


def draw_failures(agent_ids, psi: float, seed) -> FailureScenario:
    agent_ids = list(agent_ids)
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(agent_ids), size=n_failed(psi, len(agent_ids)), replace=False)
    return FailureScenario(psi, seed, frozenset(agent_ids[i] for i in picked))


def coalition_resilience(aggregate, p_min: float) -> float:
    """1 - Pr[P_S < p_min] estimated on the series; ``None`` means no survivors."""
    if aggregate is None:
        return 0.0 if p_min > 0 else 1.0
    x = np.asarray(aggregate, dtype=float)
    return 1.0 - np.count_nonzero(x < p_min) / len(x)


def _membership(structure, store: TraceStore) -> np.ndarray:
    m = np.zeros((len(structure.evaluations), len(store)))
    for c, ev in enumerate(structure.evaluations):
        m[c, [store.index_of(a) for a in ev.members]] = 1.0
    return m


def _check_mode(store, failure_mode):
    if failure_mode not in (DISCONNECT, PRODUCTION_ONLY):
        raise ValueError(f"unknown failure mode {failure_mode!r}")
    if failure_mode == PRODUCTION_ONLY and store.production is None:
        raise ValueError("production-only failures need traces simulated with keep_components=True")


def _coalition_values(member, alive, store, p_mins, failure_mode):
    """Resilience per (p_min, coalition) for one failure draw."""
    if failure_mode == DISCONNECT:
        live = member * alive
        aggs = live @ store.values
        empty = live.sum(axis=1) == 0
    else:
        aggs = member @ store.values - (member * ~alive) @ store.production
        empty = member.sum(axis=1) == 0
    out = np.empty((len(p_mins), member.shape[0]))
    for k, p in enumerate(p_mins):
        out[k] = 1.0 - np.count_nonzero(aggs < p, axis=1) / aggs.shape[1]
        out[k, empty] = 0.0 if p > 0 else 1.0
    return out


def structure_resilience(structure, scenario: FailureScenario, p_min: float, store: TraceStore,
                         failure_mode: str = DISCONNECT) -> float:
    _check_mode(store, failure_mode)
    alive = np.array([a not in scenario.failed for a in store.agent_ids])
    values = _coalition_values(_membership(structure, store), alive, store, [p_min], failure_mode)
    return float(np.prod(values[0]))


def resilience_sweeps(structure, store: TraceStore, psi_grid, replicates: int, p_mins, seed: int,
                      failure_mode: str = DISCONNECT) -> list[ResilienceReport]:
    """One report per p_min, all sharing the same failure draws.

    The draw for grid point ``g`` and replicate ``r`` is seeded with
    ``(seed, g, r)`` so that different structures can be compared on
    identical failures.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    _check_mode(store, failure_mode)
    psi_grid = tuple(float(p) for p in psi_grid)
    p_mins = [float(p) for p in p_mins]
    member = _membership(structure, store)
    n = len(store)
    per = np.empty((len(p_mins), len(psi_grid), replicates, member.shape[0]))
    for g, psi in enumerate(psi_grid):
        k = n_failed(psi, n)
        for r in range(replicates):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), g, r]))
            alive = np.ones(n, dtype=bool)
            alive[rng.choice(n, size=k, replace=False)] = False
            per[:, g, r, :] = _coalition_values(member, alive, store, p_mins, failure_mode)
    return [
        ResilienceReport(structure.provenance, p, psi_grid, per[i].prod(axis=2), per[i])
        for i, p in enumerate(p_mins)
    ]


def resilience_sweep(structure, store: TraceStore, psi_grid, replicates: int, p_min: float, seed: int,
                     failure_mode: str = DISCONNECT) -> ResilienceReport:
    return resilience_sweeps(structure, store, psi_grid, replicates, [p_min], seed, failure_mode)[0]


def write_sweep_csv(reports, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["provenance", "psi", "replicate", "resilience"])
        for rep in reports:
            for g, psi in enumerate(rep.psi_grid):
                for r, v in enumerate(rep.values[g]):
                    w.writerow([rep.provenance, repr(psi), r, repr(float(v))])


def write_summary_csv(reports, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["provenance", "psi", "mean", "std"])
        for rep in reports:
            for psi, m, s in zip(rep.psi_grid, rep.mean, rep.std):
                w.writerow([rep.provenance, repr(psi), repr(float(m)), repr(float(s))])
