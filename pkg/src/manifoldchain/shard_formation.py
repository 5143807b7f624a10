"""Bandwidth-clustered shard formation over the (PID hash x bandwidth) plane."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core_model import (DEFAULT_SCHEME, Hash256, Pid, SignatureScheme,
                         canonical_encode, hash_of)
from .pow_engine import TWO_256


class DegenerateCdf(ValueError):
    pass


class BandwidthOutOfRange(ValueError):
    pass


class NoFeasiblePartition(ValueError):
    pass


class EpochOpen(RuntimeError):
    pass


@dataclass(frozen=True)
class Partition:
    s_x: int
    s_y: int
    y_points: tuple[float, ...]
    c_min: float
    c_max: float

    def __post_init__(self):
        if self.s_x < 1 or self.s_y < 1:
            raise ValueError("s_x and s_y must be positive")
        if len(self.y_points) != self.s_y - 1:
            raise ValueError("need s_y - 1 separation points")
        if any(b <= a for a, b in zip(self.y_points, self.y_points[1:])):
            raise ValueError("separation points must be strictly increasing")

    @property
    def m(self) -> int:
        return self.s_x * self.s_y

    @property
    def y_bounds(self) -> tuple[float, ...]:
        return (self.c_min, *self.y_points, self.c_max)


@dataclass
class BandwidthEstimate:
    """Monotone cdf over (c_min, c_max]."""

    cdf: Callable[[float], float]
    c_min: float
    c_max: float

    def mass(self, a: float, b: float) -> float:
        return self.cdf(b) - self.cdf(a)

    @classmethod
    def from_samples(cls, samples: Iterable[float], c_min: float = 0.0,
                     c_max: float | None = None) -> "BandwidthEstimate":
        """Piecewise-linear cdf through (v, fraction <= v) for each distinct v.

        Repeated values become knots, so a cdf level hit by a mass atom is
        reached exactly at the atom and the regions separate atoms cleanly.
        """
        xs = np.sort(np.asarray(list(samples), dtype=float))
        if xs.size == 0:
            raise ValueError("no bandwidth samples")
        if c_max is None:
            c_max = float(xs[-1])
        if xs[0] <= c_min or xs[-1] > c_max:
            raise BandwidthOutOfRange("samples must lie in (c_min, c_max]")
        vals, counts = np.unique(xs, return_counts=True)
        knots_x = np.concatenate(([c_min], vals))
        knots_y = np.concatenate(([0.0], np.cumsum(counts) / xs.size))
        if knots_x[-1] < c_max:
            knots_x = np.append(knots_x, c_max)
            knots_y = np.append(knots_y, 1.0)

        def cdf(y: float) -> float:
            return float(np.interp(y, knots_x, knots_y))

        return cls(cdf, c_min, float(c_max))

    @classmethod
    def uniform(cls, c_min: float, c_max: float) -> "BandwidthEstimate":
        return cls(lambda y: min(1.0, max(0.0, (y - c_min) / (c_max - c_min))), c_min, c_max)

    @classmethod
    def from_file(cls, path: str, c_min: float = 0.0) -> "BandwidthEstimate":
        with open(path) as fh:
            vals = [float(line) for line in fh if line.strip()]
        return cls.from_samples(vals, c_min=c_min)


def compute_separation_points(est: BandwidthEstimate, s_y: int,
                              rel_tol: float = 1e-9) -> list[float]:
    """y_1..y_{s_y-1} with cdf(y_k) = k/s_y, by bisection.

    The returned point is the upper end of the final bracket, i.e. the
    smallest y found with cdf(y) >= k/s_y, so atoms sitting exactly on a
    quantile belong to the lower region (intervals are (y_k, y_{k+1}]).
    """
    if s_y < 1:
        raise ValueError("s_y must be >= 1")
    points = []
    span = est.c_max - est.c_min
    for k in range(1, s_y):
        target = k / s_y
        lo, hi = est.c_min, est.c_max
        while hi - lo > rel_tol * max(abs(hi), span * 1e-12, 1e-300):
            mid = 0.5 * (lo + hi)
            if est.cdf(mid) >= target:
                hi = mid
            else:
                lo = mid
        # a flat cdf around the quantile means the region boundary is arbitrary
        eps = max(rel_tol * span, 1e-12)
        if est.cdf(min(hi + eps, est.c_max)) - est.cdf(max(lo - eps, est.c_min)) <= 0:
            raise DegenerateCdf(f"cdf flat near quantile {target}")
        if est.cdf(hi) > target + 1e-6 and est.cdf(lo) < target - 1e-6:
            # a jump in a non-continuous cdf: no point has the exact mass
            raise DegenerateCdf(f"cdf jumps over quantile {target}")
        points.append(hi)
    return points


def pid_message(bandwidth_mbps: float, ip_tag: bytes) -> bytes:
    return canonical_encode((bandwidth_mbps, ip_tag))


def make_pid(seed: bytes, bandwidth_mbps: float, ip_tag: bytes = b"",
             scheme: SignatureScheme = DEFAULT_SCHEME) -> tuple[Pid, bytes]:
    """Create a signed Pid; returns (pid, secret key)."""
    secret, public = scheme.keygen(seed)
    sig = scheme.sign(secret, pid_message(bandwidth_mbps, ip_tag))
    return Pid(public, float(bandwidth_mbps), sig, ip_tag), secret


def pid_authorized(pid: Pid, scheme: SignatureScheme = DEFAULT_SCHEME) -> bool:
    return scheme.verify(pid.public_key, pid_message(pid.bandwidth_mbps, pid.ip_tag),
                         pid.bandwidth_sig)


def x_region(h: Hash256, s_x: int) -> int:
    # floor(h / (2^256 / s_x)) == floor(h * s_x / 2^256)
    return (h.as_int() * s_x) >> 256


def y_region(bandwidth: float, partition: Partition) -> int:
    if not partition.c_min < bandwidth <= partition.c_max:
        raise BandwidthOutOfRange(
            f"{bandwidth} outside ({partition.c_min}, {partition.c_max}]")
    # first k with bandwidth <= y_{k+1}
    for k, y in enumerate(partition.y_points):
        if bandwidth <= y:
            return k
    return partition.s_y - 1


def assign_shard(pid: Pid, partition: Partition) -> int:
    return y_region(pid.bandwidth_mbps, partition) * partition.s_x + \
        x_region(hash_of(pid), partition.s_x)


def honest_presence_bound(s_x: int, s_y: int, n_relevant: float) -> float:
    """(m-1)((m-1)/m)^(n-1) with m = s_x*s_y."""
    m = s_x * s_y
    if m < 1 or n_relevant < 1:
        raise ValueError("need m >= 1 and n >= 1")
    if m == 1:
        return 0.0
    return (m - 1) * ((m - 1) / m) ** (n_relevant - 1)


def s_y_cap(n_honest_est: float, rho: float, alpha_min: float) -> int:
    """Largest S_Y allowed: max(alpha*rho*N, ceil(1/(1-rho)) - 1), floored, >= 1."""
    few = math.inf if rho >= 1 else math.ceil(1 / (1 - rho)) - 1
    cap = max(alpha_min * rho * n_honest_est, few)
    cap = min(cap, n_honest_est)   # rho = 1 leaves the second branch unbounded
    return max(1, int(math.floor(cap)))


def relevant_population(s_y: int, n_honest_est: float, rho: float,
                        alpha_min: float) -> float:
    """Exponent population for the bound: alpha*rho*N when S_Y >= 1/(1-rho), else rho*N."""
    if rho < 1 and s_y < 1 / (1 - rho):
        return rho * n_honest_est
    return alpha_min * rho * n_honest_est


def select_partition(n_honest_est: float, rho: float, alpha_min: float,
                     epsilon_target: float, est: BandwidthEstimate | None = None,
                     c_min: float = 0.0, c_max: float = 1.0) -> Partition:
    """Largest admissible S_Y (reduced until S_X = 1 meets the target), then largest S_X."""
    if not 0.5 < rho <= 1 or not 0 < epsilon_target < 1:
        raise ValueError("need 0.5 < rho <= 1 and epsilon in (0, 1)")
    for s_y in range(s_y_cap(n_honest_est, rho, alpha_min), 0, -1):
        n = relevant_population(s_y, n_honest_est, rho, alpha_min)
        if n < 1 or honest_presence_bound(1, s_y, n) > epsilon_target:
            continue
        s_x = 1
        while honest_presence_bound(s_x + 1, s_y, n) <= epsilon_target:
            s_x += 1
        if est is not None:
            pts = compute_separation_points(est, s_y)
            return Partition(s_x, s_y, tuple(pts), est.c_min, est.c_max)
        width = (c_max - c_min) / s_y
        return Partition(s_x, s_y, tuple(c_min + width * k for k in range(1, s_y)),
                         c_min, c_max)
    raise NoFeasiblePartition("no (S_X, S_Y) meets the target")


@dataclass
class CredentialChain:
    """Ideal confirmed log of Pids with epoch windows [e*u, (e+1)*u)."""

    liveness_param_u: float
    entries: list[tuple[float, Pid]] = field(default_factory=list)
    now: float = 0.0
    join_fraction: dict[int, float] = field(default_factory=dict)

    def append(self, pid: Pid, confirmed_at: float) -> None:
        if self.entries and confirmed_at < self.entries[-1][0]:
            raise ValueError("credential chain is append-only in time")
        self.entries.append((confirmed_at, pid))
        self.now = max(self.now, confirmed_at)

    def advance(self, t: float) -> None:
        self.now = max(self.now, t)

    def window(self, epoch: int) -> tuple[float, float]:
        return epoch * self.liveness_param_u, (epoch + 1) * self.liveness_param_u

    def confirmed_in(self, epoch: int) -> list[Pid]:
        lo, hi = self.window(epoch)
        return [pid for t, pid in self.entries if lo <= t < hi]


def epoch_reshard(chain: CredentialChain, epoch: int, partition: Partition,
                  scheme: SignatureScheme = DEFAULT_SCHEME) -> dict[Hash256, int]:
    """Map pid hash -> shard for every authorized Pid confirmed in the epoch."""
    lo, hi = chain.window(epoch)
    if chain.now < hi:
        raise EpochOpen(f"epoch {epoch} closes at {hi}, chain time {chain.now}")
    out = {}
    for pid in chain.confirmed_in(epoch):
        if pid_authorized(pid, scheme):
            out[hash_of(pid)] = assign_shard(pid, partition)
    return out


def uniform_partition(m: int, c_min: float, c_max: float) -> Partition:
    """Hash-only split into m shards (the USF baseline)."""
    return Partition(m, 1, (), c_min, c_max)


def bcsf_partition(bandwidths: Sequence[float], m: int, c_min: float = 0.0) -> Partition:
    """Bandwidth-only split into m equal-mass regions of the empirical cdf."""
    est = BandwidthEstimate.from_samples(bandwidths, c_min=c_min)
    return Partition(1, m, tuple(compute_separation_points(est, m)), est.c_min, est.c_max)


def deal_uniform(keys: Sequence[Hash256], m: int) -> list[int]:
    """Uniform-size random split: order by hash and deal round-robin."""
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    out = [0] * len(keys)
    for rank, i in enumerate(order):
        out[i] = rank % m
    return out
