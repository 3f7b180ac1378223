"""Contract values, validity and utility of coalitions under a grid policy.

A coalition announces the largest constant power it can hold with an
under-production probability of at most ``phi``: the lower phi-quantile of
its aggregate net production. It may enter the market when that contract
is at least ``p_min``; its utility is the contract normalised by ``p_max``
and discounted by ``|S|**alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateParametersError,
    InsufficientDataError,
    MembershipError,
)

EMPIRICAL = "empirical"
GAUSSIAN = "gaussian"
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erfinv(y: float) -> float:
    """Inverse error function.

    Polynomial initial guess in ``w = -log(1 - y^2)`` (two branches), then
    Newton steps (on ``erfc`` in the tails) until the update drops below
    1e-13. Absolute error is below 1e-9 for ``|y| <= 1 - 1e-12``.
    """
    y = float(y)
    if math.isnan(y) or abs(y) > 1.0:
        return math.nan
    if abs(y) == 1.0:
        return math.copysign(math.inf, y)
    w = -math.log((1.0 - y) * (1.0 + y))
    if w < 5.0:
        w -= 2.5
        p = 2.81022636e-08
        for c in (3.43273939e-07, -3.5233877e-06, -4.39150654e-06, 0.00021858087,
                  -0.00125372503, -0.00417768164, 0.246640727, 1.50140941):
            p = c + p * w
    else:
        w = math.sqrt(w) - 3.0
        p = -0.000200214257
        for c in (0.000100950558, 0.00134934322, -0.00367342844, 0.00573950773,
                  -0.0076224613, 0.00943887047, 1.00167406, 2.83297682):
            p = c + p * w
    a = abs(y)
    x = p * a
    # one step is enough for 1 - |y| > 1e-7; the far tail, where the
    # polynomial is extrapolated, needs a few more
    for _ in range(8):
        slope = _TWO_OVER_SQRT_PI * math.exp(-x * x)
        if a > 0.5:
            # 1 - |y| is exact here; erfc keeps the residual resolvable
            step = -(math.erfc(x) - (1.0 - a)) / slope
        else:
            step = (math.erf(x) - a) / slope
        x -= step
        if abs(step) < 1e-13:
            break
    return math.copysign(x, y)


@dataclass(frozen=True)
class GridPolicy:
    p_min: float
    phi: float
    p_max: float = 1.0
    alpha: float = 0.0
    lambda_rate: float = 1.0

    def __post_init__(self):
        if self.p_min < 0:
            raise ConfigurationError("p_min must be >= 0")
        if not 0 < self.phi < 1:
            raise ConfigurationError("phi must lie in (0, 1)")
        if self.p_max <= 0:
            raise ConfigurationError("p_max must be > 0")
        if self.alpha < 0 or self.lambda_rate < 0:
            raise ConfigurationError("alpha and lambda_rate must be >= 0")

    def to_dict(self) -> dict:
        return {"p_min": self.p_min, "phi": self.phi, "p_max": self.p_max,
                "alpha": self.alpha, "lambda_rate": self.lambda_rate}


QUANTUM = 2.0**-10


def quantize(values) -> np.ndarray:
    """Round watts to multiples of 2**-10.

    Sums of such values stay exactly representable (well below 2**43 W), so
    aggregates do not depend on summation order and incremental updates
    equal recomputation bit for bit.
    """
    return np.round(np.asarray(values, dtype=float) / QUANTUM) * QUANTUM


class TraceStore:
    """Immutable matrix of quantized agent traces, rows in agent order."""

    def __init__(self, traces):
        traces = list(traces)
        if not traces:
            raise ValueError("no traces")
        self.agent_ids = tuple(t.agent_id for t in traces)
        if len(set(self.agent_ids)) != len(self.agent_ids):
            raise ValueError("agent ids must be unique")
        self.values = quantize([t.values for t in traces])
        if self.values.ndim != 2:
            raise ValueError("traces must have equal lengths")
        self.values.flags.writeable = False
        self._index = {a: i for i, a in enumerate(self.agent_ids)}
        self.production = None
        if all(getattr(t, "production", None) is not None for t in traces):
            self.production = quantize([t.production for t in traces])
            self.production.flags.writeable = False

    def __len__(self):
        return len(self.agent_ids)

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def index_of(self, agent_id) -> int:
        return self._index[agent_id]

    def coalition(self, members) -> "Coalition":
        idx = sorted({self._index[a] for a in members})
        if not idx:
            raise ValueError("a coalition needs at least one member")
        return Coalition(tuple(self.agent_ids[i] for i in idx), self.values[idx].sum(axis=0))


@dataclass(frozen=True, eq=False)
class Coalition:
    members: tuple
    aggregate: np.ndarray

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ContractEvaluation:
    members: tuple
    mu: float
    sigma: float
    p_contract: float
    valid: bool
    utility: float

    @property
    def size(self) -> int:
        return len(self.members)

    def to_dict(self) -> dict:
        return {"members": list(self.members), "mu": self.mu, "sigma": self.sigma,
                "p_contract": self.p_contract, "valid": self.valid, "utility": self.utility}


def contract_value_gaussian(mu: float, sigma: float, phi: float) -> float:
    if sigma < 0 or not 0 < phi < 1:
        raise ValueError("need sigma >= 0 and 0 < phi < 1")
    return mu - math.sqrt(2.0) * sigma * erfinv(1.0 - 2.0 * phi)


def quantile_rank(n_samples: int, phi: float) -> int:
    """1-based rank ceil(phi*T) of the order statistic used as contract."""
    if not 0 < phi < 1:
        raise ValueError("phi must lie in (0, 1)")
    # round away float noise such as 0.1 * 100 = 10.000000000000002
    k = math.ceil(round(phi * n_samples, 9))
    if round(phi * n_samples, 9) < 1:
        raise InsufficientDataError(
            f"{n_samples} samples cannot resolve the {phi} quantile (need at least {math.ceil(1 / phi)})"
        )
    return k


def contract_value_empirical(aggregate, phi: float) -> float:
    """The ceil(phi*T)-th smallest sample: at most a phi fraction lies strictly below."""
    x = np.asarray(aggregate, dtype=float)
    k = quantile_rank(len(x), phi)
    return float(np.partition(x, k - 1)[k - 1])


def contract_values_empirical(aggregates: np.ndarray, phi: float) -> np.ndarray:
    """Row-wise version of :func:`contract_value_empirical` for a 2-D array."""
    k = quantile_rank(aggregates.shape[1], phi)
    return np.partition(aggregates, k - 1, axis=1)[:, k - 1]


def is_valid(evaluation: ContractEvaluation, policy: GridPolicy) -> bool:
    return evaluation.p_contract >= policy.p_min


def gain(evaluation: ContractEvaluation, policy: GridPolicy, duration: float) -> float:
    """Revenue over ``duration`` hours at a constant price; admission is a separate question."""
    if duration < 0:
        raise ValueError("duration must be >= 0")
    return evaluation.p_contract * policy.lambda_rate * duration


def utility_value(p_contract, size, policy: GridPolicy):
    """Size-discounted normalised contract; 0 for invalid or negative contracts."""
    p = np.asarray(p_contract, dtype=float)
    ok = (p >= policy.p_min) & (p >= 0)
    out = np.where(ok, p / policy.p_max / np.asarray(size, dtype=float) ** policy.alpha, 0.0)
    return out if out.ndim else float(out)


def evaluate_aggregate(members, aggregate, policy: GridPolicy, mode: str = EMPIRICAL) -> ContractEvaluation:
    x = np.asarray(aggregate, dtype=float)
    mu = float(x.mean())
    sigma = float(x.std())
    if mode == EMPIRICAL:
        p = contract_value_empirical(x, policy.phi)
    elif mode == GAUSSIAN:
        p = contract_value_gaussian(mu, sigma, policy.phi)
    else:
        raise ValueError(f"unknown quantile mode {mode!r}")
    members = tuple(members)
    u = utility_value(p, len(members), policy)
    return ContractEvaluation(members, mu, sigma, p, p >= policy.p_min, u)


def utility(coalition: Coalition, policy: GridPolicy, mode: str = EMPIRICAL) -> ContractEvaluation:
    """Full evaluation (mu, sigma, contract, validity, utility) of a coalition."""
    return evaluate_aggregate(coalition.members, coalition.aggregate, policy, mode)


def marginal_contribution(coalition: Coalition, agent, policy: GridPolicy, store: TraceStore,
                          mode: str = EMPIRICAL) -> float:
    """Utility change from adding ``agent`` to ``coalition``."""
    if agent in coalition.members:
        raise MembershipError(f"agent {agent!r} is already a member")
    before = utility(coalition, policy, mode).utility
    grown = coalition.aggregate + store.values[store.index_of(agent)]
    after = evaluate_aggregate(coalition.members + (agent,), grown, policy, mode).utility
    return after - before


# ---------------------------------------------------------------------------
# Mean-field approximation


def mean_field_utility(n, alpha, mu_bar, sigma_bar, rho_bar, phi, p_max=1.0):
    """Gaussian utility of a homogeneous n-coalition with pairwise correlation rho_bar."""
    n = np.asarray(n, dtype=float)
    sigma_n = sigma_bar * np.sqrt(n * (1.0 + rho_bar * (n - 1.0)))
    contract = n * mu_bar - math.sqrt(2.0) * sigma_n * erfinv(1.0 - 2.0 * phi)
    out = n ** (-alpha) * contract / p_max
    return out if out.ndim else float(out)


def alpha_star(mu_bar: float, sigma_bar: float, rho_bar: float, n_bar: float, phi: float) -> float:
    """Size exponent that puts the mean-field utility's stationary point at ``n_bar``.

    Setting d/dn log(n**-alpha * C(n)) = 0 at n_bar, with
    C(n) = n mu - sqrt(2) sigma sqrt(n g) erfinv(1 - 2 phi) and
    g = rho n - rho + 1, gives

        alpha = 1 + s (rho - 1) e / (mu sqrt(n g) + 2 s e g)

    where e = erfinv(2 phi - 1) and s = sigma / sqrt(2).
    """
    if n_bar < 1 or not 0 < phi < 0.5 or sigma_bar <= 0 or mu_bar <= 0 or not 0 <= rho_bar <= 1:
        raise DegenerateParametersError(
            "need n_bar >= 1, 0 < phi < 0.5, sigma_bar > 0, mu_bar > 0, rho_bar in [0, 1]"
        )
    e = erfinv(2.0 * phi - 1.0)
    g = rho_bar * n_bar - rho_bar + 1.0
    s = sigma_bar / math.sqrt(2.0)
    lead, tail = mu_bar * math.sqrt(n_bar * g), 2.0 * s * e * g
    denom = lead + tail
    if not math.isfinite(denom) or abs(denom) <= 1e-12 * (abs(lead) + abs(tail)):
        raise DegenerateParametersError("zero denominator: the contract vanishes at n_bar")
    return 1.0 + s * (rho_bar - 1.0) * e / denom


def mean_field_params(store: TraceStore, rho: np.ndarray | None = None) -> tuple[float, float, float]:
    """Population means of per-agent mu, sigma and off-diagonal correlation."""
    x = store.values
    mu_bar = float(x.mean(axis=1).mean())
    sigma_bar = float(x.std(axis=1).mean())
    if rho is None:
        rho = np.corrcoef(x)
    n = rho.shape[0]
    rho_bar = float((rho.sum() - np.trace(rho)) / (n * (n - 1)))
    return mu_bar, sigma_bar, rho_bar
