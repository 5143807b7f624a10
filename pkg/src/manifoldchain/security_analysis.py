"""Closed-form security and throughput expressions, the mining-rate optimiser
and Monte-Carlo oracles that cross-check the bounds.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .shard_formation import honest_presence_bound  # re-exported

__all__ = [
    "RateConfig", "SecurityReport", "PiOutOfRange", "NoRealRoot", "Infeasible",
    "honest_fraction_p", "cp_error_bound", "chain_growth_rate", "chain_quality_rate",
    "honest_presence_bound", "delta_bar", "required_p", "optimize_rates",
    "constraints_hold", "throughput_bound", "improvement", "security_report",
    "private_mining_mc", "private_mining_exact", "wilson_upper", "empty_shard_exact",
    "empty_shard_mc", "simulate_chain_growth",
]


class PiOutOfRange(ValueError):
    pass


class NoRealRoot(ValueError):
    pass


class Infeasible(ValueError):
    pass


@dataclass
class RateConfig:
    """Mining rates and network parameters of an m-shard deployment.

    ``lambda_s`` is the inclusive-block rate contributed by each shard,
    ``lambda_i[k]`` the exclusive-block rate of shard k (blocks/s);
    ``delta_i[k]`` is shard k's maximum full-block delay in seconds.
    """

    m: int
    lambda_s: float
    lambda_i: list[float]
    delta_i: list[float]
    rho: float
    rho_i: list[float]
    kappa: int = 6
    block_size_B: float = 0.0
    delta_p: float = 0.0
    tx_per_block: int = 1

    def __post_init__(self):
        if not 0.5 < self.rho <= 1:
            raise ValueError("need 0.5 < rho <= 1")
        if not (len(self.lambda_i) == len(self.delta_i) == len(self.rho_i) == self.m):
            raise ValueError("per-shard lists must have length m")
        if any(not 0 <= r <= 1 for r in self.rho_i):
            raise ValueError("rho_i must lie in [0, 1]")
        if self.lambda_s < 0 or any(x < 0 for x in self.lambda_i):
            raise ValueError("rates must be non-negative")

    @staticmethod
    def delays_from_bandwidth(block_size_B: float, lowest_bw: Sequence[float],
                              delta_p: float) -> list[float]:
        """B / lowest bandwidth + propagation delay, per shard (bytes, bytes/s, s)."""
        return [block_size_B / c + delta_p for c in lowest_bw]

    @property
    def delta(self) -> float:
        return max(self.delta_i)

    def gamma(self, i: int) -> float:
        return self.lambda_i[i] / self.lambda_s if self.lambda_s > 0 else math.inf

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RateConfig":
        return cls(**d)


def honest_fraction_p(cfg: RateConfig, i: int) -> float:
    """Probability that a hypothetical block of shard i is exactly honest."""
    li, ls, m = cfg.lambda_i[i], cfg.lambda_s, cfg.m
    mix = (li * cfg.rho_i[i] + m * ls * cfg.rho) / (li + m * ls)
    return mix * math.exp(-(li + ls) * cfg.delta_i[i])


def cp_error_bound(p_i: float, kappa: float) -> float:
    """(2 + 2 sqrt(p/(1-p))) (4p(1-p))^kappa, for 1/2 <= p < 1."""
    if not 0.5 <= p_i < 1:
        raise PiOutOfRange(f"p_i = {p_i} outside [1/2, 1)")
    return (2 + 2 * math.sqrt(p_i / (1 - p_i))) * (4 * p_i * (1 - p_i)) ** kappa


def chain_growth_rate(cfg: RateConfig, i: int, delta_slack: float = 0.0,
                      p_free_denominator: bool = False) -> float:
    """Lower bound on shard i's chain growth rate.

    The default denominator is 1 + Delta_i p_i (lambda_s + lambda_i);
    ``p_free_denominator`` drops p_i from it, which gives a smaller bound.
    """
    p = honest_fraction_p(cfg, i)
    lam = cfg.lambda_s + cfg.lambda_i[i]
    denom = 1 + cfg.delta_i[i] * lam * (1.0 if p_free_denominator else p)
    return (1 - delta_slack) * p * lam / denom


def chain_quality_rate(cfg: RateConfig, i: int, delta_slack: float = 0.0,
                       with_adversary_factor: bool = False) -> float:
    """Lower bound on the honest fraction of shard i's chain.

    With ``with_adversary_factor`` the rho_i inside the bracket is replaced
    by (1 - rho_i).
    """
    p = honest_fraction_p(cfg, i)
    lam = cfg.lambda_s + cfg.lambda_i[i]
    r = (1 - cfg.rho_i[i]) if with_adversary_factor else cfg.rho_i[i]
    return 1 - (1 + delta_slack) * (1 + cfg.delta_i[i] * p * r * lam) / p


def delta_bar(P_bar: float, kappa: float, lambda_lower: float, delta_lower: float) -> float:
    """Minimum honest-block probability that keeps the error under P_bar.

    1/2 (1 + sqrt(1 - (P_bar / (2 + 2 sqrt(pb / (1 - pb))))^(1/kappa)))
    with pb = exp(-lambda * Delta).
    """
    if not 0 < P_bar < 1:
        raise ValueError("P_bar must lie in (0, 1)")
    x = lambda_lower * delta_lower
    if x <= 0:
        raise NoRealRoot("need lambda * Delta > 0")
    odds = 1.0 / math.expm1(x)           # pb / (1 - pb)
    arg = P_bar / (2 + 2 * math.sqrt(odds))
    if arg > 1:
        raise NoRealRoot("P_bar exceeds the prefactor")
    one_minus_root = -math.expm1(math.log(arg) / kappa)
    return 0.5 * (1 + math.sqrt(one_minus_root))


def required_p(epsilon: float, kappa: float) -> float:
    """Smallest p in (1/2, 1) with cp_error_bound(p, kappa) <= epsilon."""
    if not 0 < epsilon < 4:
        raise ValueError("epsilon must lie in (0, 4)")
    lo, hi = 0.5, 1.0 - 1e-16
    if cp_error_bound(hi, kappa) > epsilon:
        raise Infeasible("no p < 1 meets the target")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cp_error_bound(mid, kappa) <= epsilon:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-17:
            break
    return hi


def _shard_ok(cfg: RateConfig, i: int, epsilon: float, kappa: float) -> bool:
    p = honest_fraction_p(cfg, i)
    return p > 0.5 and cp_error_bound(p, kappa) <= epsilon


def constraints_hold(cfg: RateConfig, epsilon: float, kappa: Optional[float] = None) -> bool:
    """Both optimisation constraints for every shard."""
    k = cfg.kappa if kappa is None else kappa
    return all(_shard_ok(cfg, i, epsilon, k) for i in range(cfg.m))


def _max_feasible(ok, start: float, rel_tol: float) -> float:
    """Largest x >= 0 with ok(x), for ok monotone (true then false)."""
    lo, hi = 0.0, max(start, 1e-12)
    while ok(hi):
        lo, hi = hi, hi * 2
        if hi > 1e12:
            raise Infeasible("rate unbounded")
    while hi - lo > rel_tol * max(hi, 1e-300):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def optimize_rates(m: int, delta_i: Sequence[float], rho: float, kappa_prime: int,
                   epsilon: float, rel_tol: float = 1e-12, **extra) -> RateConfig:
    """Throughput-maximising rates under the per-shard security constraints.

    Worst-case rho_i = 0.  lambda_s is the largest value the slowest shard
    tolerates with no exclusive blocks; each other shard then takes the
    largest exclusive rate that keeps its own constraints.
    """
    if not 0.5 < rho <= 1:
        raise ValueError("need 0.5 < rho <= 1")
    delta_i = [float(d) for d in delta_i]
    slow = int(np.argmax(delta_i))
    base = RateConfig(m, 0.0, [0.0] * m, delta_i, rho, [0.0] * m, kappa_prime, **extra)
    p_star = required_p(epsilon, kappa_prime)
    if rho <= p_star:
        raise Infeasible("honest fraction below the required p")

    def ok_s(ls: float) -> bool:
        return ls > 0 and _shard_ok(replace(base, lambda_s=ls), slow, epsilon, kappa_prime)

    guess = math.log(rho / p_star) / delta_i[slow]
    lam_s = _max_feasible(ok_s, guess, rel_tol)
    if lam_s <= 0:
        raise Infeasible("no positive inclusive rate is feasible")
    lam_i = [0.0] * m
    for i in range(m):
        if i == slow or delta_i[i] >= delta_i[slow]:
            continue
        probe = replace(base, lambda_s=lam_s)

        def ok_i(li: float, i=i, probe=probe) -> bool:
            lst = list(probe.lambda_i)
            lst[i] = li
            return _shard_ok(replace(probe, lambda_i=lst), i, epsilon, kappa_prime)

        lam_i[i] = _max_feasible(ok_i, lam_s, rel_tol)
    return replace(base, lambda_s=lam_s, lambda_i=lam_i)


def throughput_bound(cfg: RateConfig, P_bar: float,
                     lambda_lower: Optional[float] = None,
                     delta_lower: Optional[float] = None) -> dict:
    """Throughput ceiling (blocks/s times tx_per_block), per shard and total.

    The cap is (1/Delta) log(rho / delta_bar) (m rho + sum gamma_i rho_i)
    with Delta the largest shard delay.  ``lambda_lower``/``delta_lower``
    default to lambda_s and the smallest shard delay.
    """
    lam = cfg.lambda_s if lambda_lower is None else lambda_lower
    dl = min(cfg.delta_i) if delta_lower is None else delta_lower
    d = delta_bar(P_bar, cfg.kappa, lam, dl)
    unit = math.log(cfg.rho / d) / cfg.delta * cfg.tx_per_block
    gam = [cfg.gamma(i) for i in range(cfg.m)]
    per = [unit * (cfg.rho + g * r) for g, r in zip(gam, cfg.rho_i)]
    return {
        "delta_bar": d,
        "per_shard": per,
        "total": unit * (cfg.m * cfg.rho + sum(g * r for g, r in zip(gam, cfg.rho_i))),
        "improvement": [improvement(cfg, i) for i in range(cfg.m)],
    }


def improvement(cfg: RateConfig, i: int) -> float:
    """gamma_i rho_i / rho: shard i's gain over a hash-only shard."""
    return cfg.gamma(i) * cfg.rho_i[i] / cfg.rho


def gamma_from_delay_ratio(m: int, rho: float, p_star: float, ratio: float) -> float:
    """gamma solving (1/(gamma+1)) log(m rho/(p*(gamma+m))) / log(rho/p*) = ratio."""
    L = math.log(rho / p_star)

    def f(g: float) -> float:
        return math.log(m * rho / (p_star * (g + m))) / ((g + 1) * L) - ratio

    hi = 1.0
    while f(hi) > 0:
        hi *= 2
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class SecurityReport:
    p: list[float]
    epsilon_kappa: list[float]
    g: list[float]
    g_p_free: list[float]
    q: list[float]
    q_adversary_factor: list[float]
    feasible: list[bool]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = ["shard        p_i     eps(kappa)        g_i      q_i  feasible"]
        for i, p in enumerate(self.p):
            eps = self.epsilon_kappa[i]
            rows.append(f"{i:5d}  {p:9.6f}  {eps:13.6e}  {self.g[i]:9.5f}  {self.q[i]:7.4f}  "
                        f"{'yes' if self.feasible[i] else 'NO'}")
        return "\n".join(rows + self.notes)


def security_report(cfg: RateConfig, delta_slack: float = 0.0) -> SecurityReport:
    ps = [honest_fraction_p(cfg, i) for i in range(cfg.m)]
    eps = [cp_error_bound(p, cfg.kappa) if 0.5 <= p < 1 else math.inf for p in ps]
    return SecurityReport(
        p=ps, epsilon_kappa=eps,
        g=[chain_growth_rate(cfg, i, delta_slack) for i in range(cfg.m)],
        g_p_free=[chain_growth_rate(cfg, i, delta_slack, True) for i in range(cfg.m)],
        q=[chain_quality_rate(cfg, i, delta_slack) for i in range(cfg.m)],
        q_adversary_factor=[chain_quality_rate(cfg, i, delta_slack, True) for i in range(cfg.m)],
        feasible=[p > 0.5 for p in ps],
        notes=["g: denominator 1 + Delta_i p_i lambda (alt form without p_i in g_p_free)",
               "q: bracket uses rho_i (alt form with 1 - rho_i in q_adversary_factor)"],
    )


# ---------------------------------------------------------------------------
# Monte-Carlo and exact oracles

def private_mining_mc(p: float, kappa: int, trials: int,
                      rng: np.random.Generator) -> int:
    """Count trials with 2 Adv + 2 B + M >= 2 kappa - 1.

    Adv and M are geometric with P(X >= l) = ((1-p)/p)^l, and given Adv = l,
    B ~ Binomial(max(2 kappa - l, 0), 1 - p).
    """
    if not 0.5 < p < 1:
        raise PiOutOfRange(p)
    r = (1 - p) / p
    # numpy's geometric counts trials to first success, support 1, 2, ...
    adv = rng.geometric(1 - r, size=trials) - 1
    mx = rng.geometric(1 - r, size=trials) - 1
    n = np.maximum(2 * kappa - adv, 0)
    b = rng.binomial(n, 1 - p)
    return int(np.count_nonzero(2 * adv + 2 * b + mx >= 2 * kappa - 1))


def private_mining_exact(p: float, kappa: int) -> float:
    """Exact P(2 Adv + 2 B + M >= 2 kappa - 1) under the same model."""
    r = (1 - p) / p
    need = 2 * kappa - 1
    total = 0.0
    # Adv >= kappa already suffices since 2 kappa >= need
    total += r ** kappa
    for l in range(kappa):
        p_l = r ** l * (1 - r)
        n = 2 * kappa - l
        pmf = stats.binom.pmf(np.arange(n + 1), n, 1 - p)
        for j in range(n + 1):
            rest = need - 2 * l - 2 * j
            tail = 1.0 if rest <= 0 else r ** rest
            total += p_l * pmf[j] * tail
    return total


def wilson_upper(successes: int, trials: int, confidence: float = 0.99) -> float:
    z = stats.norm.ppf(1 - (1 - confidence) / 2)
    ph = successes / trials
    denom = 1 + z * z / trials
    centre = ph + z * z / (2 * trials)
    spread = z * math.sqrt(ph * (1 - ph) / trials + z * z / (4 * trials * trials))
    return (centre + spread) / denom


def empty_shard_exact(n: int, m: int) -> float:
    """P(some shard gets no miner) for n uniform assignments, by enumeration."""
    grid = np.indices((m,) * n).reshape(n, -1)
    empty = np.zeros(grid.shape[1], dtype=bool)
    for k in range(m):
        empty |= ~(grid == k).any(axis=0)
    return float(empty.mean())


def empty_shard_mc(n: int, m: int, trials: int, rng: np.random.Generator,
                   batch: int = 200_000) -> int:
    hits = 0
    left = trials
    while left > 0:
        t = min(batch, left)
        a = rng.integers(0, m, size=(t, n), dtype=np.int8)
        empty = np.zeros(t, dtype=bool)
        for k in range(m):
            empty |= ~(a == k).any(axis=1)
        hits += int(empty.sum())
        left -= t
    return hits


def simulate_chain_growth(rate: float, delta: float, horizon: float,
                          rng: np.random.Generator) -> float:
    """Honest-only growth: a block extends the chain once the last counted
    block has been out for delta seconds.  Returns blocks per second."""
    n = rng.poisson(rate * horizon)
    times = np.sort(rng.uniform(0, horizon, size=n))
    count, ready = 0, 0.0
    for t in times:
        if t >= ready:
            count += 1
            ready = t + delta
    return count / horizon
