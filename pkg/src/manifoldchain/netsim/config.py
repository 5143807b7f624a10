"""Scenario documents: parsing, validation and resolution into a roster
with shard assignment and mining rates."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from ..core_model import hash_of
from ..security_analysis import Infeasible, RateConfig, optimize_rates
from ..shard_formation import assign_shard, bcsf_partition, deal_uniform, make_pid


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class DelayModel:
    """Size-proportional link delay: size / bandwidth + propagation.

    ``link`` picks which end pays the transmission: ``min`` charges the
    slower of sender and receiver, ``sender``/``receiver`` one side only,
    ``both`` charges the two serially.
    """

    block_size_B: float = 547_140.0
    delta_p: float = 0.002
    header_B: float = 200.0
    testimony_unit_B: float = 256.0
    txs_per_block: int = 2048
    sample_k: int = 128
    proof_level_B: float = 32.0
    link: str = "min"

    def __post_init__(self):
        if self.block_size_B <= 0 or self.delta_p < 0 or self.txs_per_block < 1:
            raise ConfigInvalid("delay model needs positive block size and txs per block")
        if self.link not in ("min", "sender", "receiver", "both"):
            raise ConfigInvalid(f"unknown link rule {self.link!r}")

    @property
    def tx_B(self) -> float:
        return (self.block_size_B - self.header_B) / self.txs_per_block

    @staticmethod
    def bytes_per_s(mbps: float) -> float:
        return mbps * 1e6 / 8.0

    def delay(self, size_B: float, bw_from: float, bw_to: float) -> float:
        """Seconds for one message; bandwidths in Mbps (inf for clients)."""
        if self.link == "min":
            t = size_B / self.bytes_per_s(min(bw_from, bw_to))
        elif self.link == "sender":
            t = size_B / self.bytes_per_s(bw_from)
        elif self.link == "receiver":
            t = size_B / self.bytes_per_s(bw_to)
        else:
            t = size_B / self.bytes_per_s(bw_from) + size_B / self.bytes_per_s(bw_to)
        return t + self.delta_p

    def full_block_delay(self, mbps: float) -> float:
        return self.block_size_B / self.bytes_per_s(mbps) + self.delta_p

    def body_B(self, n_tx: int, n_units: int) -> float:
        return n_tx * self.tx_B + n_units * self.testimony_unit_B

    def sample_response_B(self, body_B: float, n_chunks: int) -> float:
        k = self.sample_k
        return n_chunks * (body_B / k + self.proof_level_B * math.log2(2 * k))

    def max_delay(self, bandwidths: list[float]) -> float:
        """Worst honest delay between two nodes, i.e. the synchrony bound."""
        lo = min(bandwidths)
        return self.delay(self.block_size_B, lo, lo)


@dataclass(frozen=True)
class NodeSpec:
    id: int
    bandwidth_mbps: float
    hash_power_share: float
    honest: bool
    shard: int = -1


@dataclass
class Workload:
    tx_rate: float = 1.0            # new user transactions per second per shard
    cross_ratio: float = 0.0
    saturate: bool = True           # pad every block with synthetic txs
    stop_before: float = 0.0        # stop generating this many seconds before the end
    amount: int = 100

    def __post_init__(self):
        if self.tx_rate < 0 or not 0 <= self.cross_ratio <= 1 or self.stop_before < 0:
            raise ConfigInvalid("workload needs tx_rate >= 0, cross_ratio in [0, 1]")


ADVERSARIES = ("honest", "private_mining", "hpsa", "corruption_transfer")


@dataclass
class Scenario:
    name: str
    m: int
    formation: str = "bcsf"
    nodes: dict = field(default_factory=dict)
    adversary: dict = field(default_factory=lambda: {"kind": "honest"})
    rates: dict = field(default_factory=lambda: {"mode": "auto"})
    kappa: int = 6
    delay: DelayModel = field(default_factory=DelayModel)
    duration: float = 60.0
    workload: Workload = field(default_factory=Workload)
    validation: bool = True
    sample_interval: float = 1.0
    adversarial_delay: float = 0.0  # fraction of the remaining synchrony slack added to honest messages
    seeds: list[int] = field(default_factory=lambda: [0])

    # -- parsing ----------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ConfigInvalid("scenario must be a JSON object")
        d = copy.deepcopy(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigInvalid(f"unknown scenario keys: {sorted(extra)}")
        try:
            if "delay" in d:
                d["delay"] = DelayModel(**d["delay"])
            if "workload" in d:
                d["workload"] = Workload(**d["workload"])
            sc = cls(**d)
        except TypeError as e:
            raise ConfigInvalid(str(e)) from None
        sc.validate()
        return sc

    @classmethod
    def load(cls, path: str) -> "Scenario":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigInvalid(f"cannot read scenario {path}: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes: Any) -> "Scenario":
        d = self.to_dict()
        d.update(changes)
        return Scenario.from_dict(d)

    def validate(self) -> None:
        if self.m < 1:
            raise ConfigInvalid("m must be >= 1")
        if self.formation not in ("bcsf", "usf"):
            raise ConfigInvalid(f"formation must be bcsf or usf, got {self.formation!r}")
        if self.kappa < 1 or self.duration <= 0 or self.sample_interval <= 0:
            raise ConfigInvalid("kappa, duration and sample_interval must be positive")
        if not 0 <= self.adversarial_delay <= 1:
            raise ConfigInvalid("adversarial_delay must lie in [0, 1]")
        if self.adversary.get("kind", "honest") not in ADVERSARIES:
            raise ConfigInvalid(f"unknown adversary {self.adversary.get('kind')!r}")
        mode = self.rates.get("mode", "auto")
        if mode not in ("auto", "explicit"):
            raise ConfigInvalid("rates.mode must be auto or explicit")
        if mode == "explicit":
            if "lambda_s" not in self.rates or len(self.rates.get("lambda_i", [])) != self.m:
                raise ConfigInvalid("explicit rates need lambda_s and m values of lambda_i")
        if "bandwidths" not in self.nodes and "groups" not in self.nodes:
            raise ConfigInvalid("nodes need 'bandwidths' or 'groups'")


# -- resolution --------------------------------------------------------------------

@dataclass
class Resolved:
    """A scenario bound to one seed: roster, shards and rates."""

    scenario: Scenario
    seed: int
    nodes: list[NodeSpec]
    rates: RateConfig
    shard_members: list[list[int]]
    delta_global: float
    note: str = ""

    @property
    def m(self) -> int:
        return self.scenario.m


def roster_bandwidths(nodes: dict, rng: np.random.Generator) -> list[float]:
    if "bandwidths" in nodes:
        bws = [float(b) for b in nodes["bandwidths"]]
    else:
        floor = float(nodes.get("min_mbps", 1.0))
        bws = []
        for g in nodes["groups"]:
            draws = rng.normal(float(g["mean"]), float(g.get("std", 0.0)), int(g["count"]))
            bws.extend(max(floor, float(x)) for x in draws)
    if not bws or any(b <= 0 for b in bws):
        raise ConfigInvalid("bandwidths must be positive and non-empty")
    return bws


def _assign(sc: Scenario, bws: list[float], seed: int) -> list[int]:
    pids = [make_pid(f"node/{seed}/{i}".encode(), bw)[0] for i, bw in enumerate(bws)]
    if sc.m == 1:
        return [0] * len(bws)
    if sc.formation == "usf":
        return deal_uniform([hash_of(p) for p in pids], sc.m)
    try:
        part = bcsf_partition(bws, sc.m)
    except ValueError as e:
        raise ConfigInvalid(f"bandwidth partition failed: {e}") from None
    return [assign_shard(p, part) for p in pids]


def _adversary_ids(sc: Scenario, shards: list[int], bws: list[float]) -> set[int]:
    adv = sc.adversary
    kind = adv.get("kind", "honest")
    if kind == "honest":
        return set()
    if "nodes" in adv:
        return {int(i) for i in adv["nodes"]}
    if kind == "corruption_transfer":
        return {int(i) for p in adv.get("phases", []) for i in p.get("nodes", [])}
    count = int(adv.get("count", 1))
    target = adv.get("target_shard")
    if kind == "hpsa" and target is None:
        target = "slowest"
    if target in ("fastest", "slowest"):
        speed = {}
        for i, s in enumerate(shards):
            speed[s] = min(speed.get(s, math.inf), bws[i])
        pick = max if target == "fastest" else min
        target = pick(speed, key=lambda s: (speed[s], -s))
    pool = [i for i, s in enumerate(shards) if target is None or s == int(target)]
    # the highest ids of the pool, so the lowest-id honest node stays the reference
    return set(sorted(pool)[-count:]) if count > 0 else set()


def resolve(sc: Scenario, seed: int) -> Resolved:
    roster_rng = np.random.default_rng([seed, 101])
    bws = roster_bandwidths(sc.nodes, roster_rng)
    shards = _assign(sc, bws, seed)
    members = [[i for i, s in enumerate(shards) if s == k] for k in range(sc.m)]
    if any(not g for g in members):
        raise ConfigInvalid("a shard is empty after formation")
    adv = _adversary_ids(sc, shards, bws)
    if any(not [i for i in g if i not in adv] for g in members):
        raise ConfigInvalid("every shard needs an honest node")
    n = len(bws)
    shares = sc.nodes.get("hash_power")
    if shares is None:
        shares = [1.0 / n] * n
    if len(shares) != n or any(x < 0 for x in shares) or not math.isclose(sum(shares), 1.0):
        raise ConfigInvalid("hash_power must be n non-negative shares summing to 1")
    nodes = [NodeSpec(i, bws[i], float(shares[i]), i not in adv, shards[i]) for i in range(n)]
    dm = sc.delay
    delta_global = dm.max_delay(bws)
    rate_cfg = _rates(sc, nodes, members, dm, delta_global)
    rho = sc.rates.get("rho")
    adv_share = sum(x.hash_power_share for x in nodes if not x.honest)
    if rho is not None and adv_share > 1 - float(rho) + 1e-12 and sc.adversary.get("enforce_rho", True):
        raise ConfigInvalid(f"adversarial share {adv_share:.3f} exceeds 1 - rho")
    return Resolved(sc, seed, nodes, rate_cfg, members, delta_global)


def shard_delays(sc: Scenario, nodes: list[NodeSpec], members: list[list[int]],
                 dm: DelayModel, delta_global: float) -> list[float]:
    if sc.formation == "usf":
        # hash-only shards carry stragglers everywhere: every shard gets the global delay
        return [delta_global] * sc.m
    return [dm.full_block_delay(min(nodes[i].bandwidth_mbps for i in g)) for g in members]


def _rates(sc: Scenario, nodes, members, dm: DelayModel, delta_global: float) -> RateConfig:
    r = sc.rates
    deltas = shard_delays(sc, nodes, members, dm, delta_global)
    rho = float(r.get("rho", 1.0))
    common = dict(block_size_B=dm.block_size_B, delta_p=dm.delta_p, tx_per_block=dm.txs_per_block)
    if r.get("mode", "auto") == "explicit":
        return RateConfig(sc.m, float(r["lambda_s"]), [float(x) for x in r["lambda_i"]], deltas,
                          rho, [rho] * sc.m, sc.kappa, **common)
    try:
        cfg = optimize_rates(sc.m, deltas, rho, int(r.get("kappa_prime", sc.kappa)),
                             float(r.get("epsilon", 1e-3)), **common)
    except (Infeasible, ValueError) as e:
        raise ConfigInvalid(f"rate optimisation failed: {e}") from None
    scale = float(r.get("scale", 1.0))
    if scale != 1.0:
        cfg.lambda_s *= scale
        cfg.lambda_i = [x * scale for x in cfg.lambda_i]
    return cfg
