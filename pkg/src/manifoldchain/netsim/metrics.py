"""Run measurements and the JSON report.

Everything recorded is a function of simulated time and events, never of
wall-clock time, so the report digest is reproducible per (scenario, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from ..core_model import Hash256, TxKind, Vote

if TYPE_CHECKING:
    from .node import Node
    from .sim import Simulation
    from .workload import UserTx


def _summary(xs: list[float]) -> dict:
    if not xs:
        return {"count": 0, "mean": None, "p50": None, "p90": None}
    a = np.asarray(xs)
    return {"count": int(a.size), "mean": float(a.mean()),
            "p50": float(np.percentile(a, 50)), "p90": float(np.percentile(a, 90))}


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    m: int
    formation: str
    duration: float
    throughput_per_shard: list[float]
    throughput_total: float
    blocks_mined: list[int]
    blocks_confirmed: list[int]
    forking_rate_per_shard: list[Optional[float]]
    forking_rate: Optional[float]
    latency: dict
    latency_domestic: dict
    latency_cross: dict
    unconfirmed: dict
    safety_violations: int
    violations_per_shard: list[int]
    divergence_observed: bool
    divergence_series: list[list[float]]
    invalid_confirmed: int
    atomicity_violations: int
    quiescent_agreement: bool
    max_honest_delay: float
    delta_global: float
    shard_delta: list[float]
    lambda_s: float
    lambda_i: list[float]
    bytes_by_kind: dict
    bytes_per_link: dict
    events: int
    malformed: int
    adversary: dict
    trace_digest: str
    digest: str = ""

    @property
    def throughput_mean(self) -> float:
        return self.throughput_total / self.m

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def compute_digest(self) -> str:
        d = self.to_dict()
        d.pop("digest")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


class Metrics:
    def __init__(self, sim: "Simulation"):
        self.sim = sim
        m = sim.m
        self.max_honest_delay = 0.0
        self.malformed = 0
        self.bytes_by_kind: dict[str, float] = {}
        self.bytes_per_link: dict[str, float] = {}
        self.mined = [0] * m
        self.mined_honest: list[set[Hash256]] = [set() for _ in range(m)]
        self.pending: dict[bytes, "UserTx"] = {}
        self.cross_left: dict[bytes, set[int]] = {}
        self.cross_inputs: dict[bytes, dict[int, Vote]] = {}
        self.cross_outputs: dict[bytes, dict[int, Vote]] = {}
        self.lat_dom: list[float] = []
        self.lat_cross: list[float] = []
        self.rollbacks = [0] * m
        self.detected: dict[Hash256, float] = {}
        self.divergence: list[list[float]] = []
        self.divergence_observed = False
        self.invalid_confirmed_nodes: set[int] = set()
        self.tainted: set[Hash256] = set()
        self.throughput: Optional[list[float]] = None
        self.confirmed_blocks: Optional[list[int]] = None
        self.quiescent_agreement = True

    # -- event hooks -----------------------------------------------------------

    def count_bytes(self, a: int, b: int, mtype: int, size: float) -> None:
        from .sim import MSG_NAMES
        name = MSG_NAMES[mtype]
        self.bytes_by_kind[name] = self.bytes_by_kind.get(name, 0.0) + size
        key = f"{'client' if a < 0 else a}->{b}"
        self.bytes_per_link[key] = self.bytes_per_link.get(key, 0.0) + size

    def on_block(self, node: "Node", h: Hash256, header, inclusive: bool, now: float) -> None:
        self.mined[node.shard] += 1
        if node.honest:
            self.mined_honest[node.shard].add(h)

    def on_tx_created(self, utx: "UserTx") -> None:
        self.pending[utx.key] = utx
        if utx.cross:
            self.cross_left[utx.key] = set(utx.out_shards)
            self.cross_inputs[utx.key] = {}
            self.cross_outputs[utx.key] = {}

    def on_reference_confirm(self, node: "Node", h: Hash256, body) -> None:
        now = self.sim.now
        key_of = self.sim.key_of
        for tx, label in zip(body.txs, body.labels):
            kind = tx.kind
            if kind is TxKind.DOMESTIC:
                utx = self.pending.pop(key_of(tx), None)
                if utx is not None:
                    self.lat_dom.append(now - utx.created)
            elif kind is TxKind.CROSS_INPUT:
                d = self.cross_inputs.get(tx.cross_id)
                if d is not None:
                    d.setdefault(node.shard, label)
            elif kind is TxKind.CROSS_OUTPUT:
                cid = tx.cross_id
                d = self.cross_outputs.get(cid)
                if d is not None:
                    d.setdefault(node.shard, label)
                left = self.cross_left.get(cid)
                if left is not None and label is Vote.ACCEPT:
                    left.discard(node.shard)
                    if not left:
                        del self.cross_left[cid]
                        utx = self.pending.pop(cid, None)
                        if utx is not None:
                            self.lat_cross.append(now - utx.created)

    def on_rollback(self, node: "Node") -> None:
        self.rollbacks[node.shard] += 1

    def on_invalid_detected(self, node: "Node", h: Hash256, now: float) -> None:
        self.detected.setdefault(h, now)

    # -- sampling ----------------------------------------------------------------

    def sample(self, t: float, final: bool, quiescent: bool = False) -> None:
        sim = self.sim
        honest = [n for n in sim.nodes if n.honest]
        for n in honest:
            n.refresh_all()
        diverged = 0
        for s in range(sim.m):
            chains = [n.trackers[s].confirmed for n in honest]
            longest = max(chains, key=len)
            if any(c != longest[:len(c)] for c in chains):
                diverged += 1
        self.divergence.append([round(t, 6), diverged])
        if diverged:
            self.divergence_observed = True
            if quiescent:
                self.quiescent_agreement = False
        # a confirmed chain holding a descendant of a tainted block holds the block itself
        self.tainted = sim.strategy.tainted()
        if self.tainted:
            for n in honest:
                if any(n.cset[s] & self.tainted for s in range(sim.m)):
                    self.invalid_confirmed_nodes.add(n.id)
        if final:
            self._snapshot_throughput()

    def _snapshot_throughput(self) -> None:
        sim = self.sim
        tp, nb = [], []
        for s, r in enumerate(sim.reference):
            ref = sim.nodes[r]
            txs = 0
            blocks = 0
            for h in ref.trackers[s].confirmed:
                info = sim.info.get(h)
                if info is not None and info[0] == s:
                    txs += info[4]
                    blocks += 1
            tp.append(txs / sim.t_end)
            nb.append(blocks)
        self.throughput = tp
        self.confirmed_blocks = nb

    def _on_chain(self) -> list[int]:
        """Honest blocks of each shard on its reference node's final chain."""
        sim = self.sim
        return [len(set(sim.nodes[r].mc.views[s].verified_chain()) & self.mined_honest[s])
                for s, r in enumerate(sim.reference)]

    def _atomicity(self) -> int:
        bad = 0
        for cid, outs in self.cross_outputs.items():
            if any(v is Vote.ACCEPT for v in outs.values()):
                ins = self.cross_inputs.get(cid, {})
                if any(v is Vote.REJECT for v in ins.values()):
                    bad += 1
        return bad

    def report(self, trace_digest: str) -> MetricsReport:
        sim = self.sim
        sc = sim.scenario
        if self.throughput is None:
            self._snapshot_throughput()
        kept = self._on_chain()
        made = [len(x) for x in self.mined_honest]
        forks = [1.0 - k / n if n else None for k, n in zip(kept, made)]
        fr = 1.0 - sum(kept) / sum(made) if sum(made) else None
        viol = [0] * sim.m
        for n in sim.nodes:
            if n.honest:
                for s in range(sim.m):
                    viol[s] += n.trackers[s].violations
        dom_left = sum(1 for u in self.pending.values() if not u.cross)
        cross_left = sum(1 for u in self.pending.values() if u.cross)
        rep = MetricsReport(
            scenario=sc.name, seed=sim.seed, m=sim.m, formation=sc.formation,
            duration=sim.t_end,
            throughput_per_shard=self.throughput,
            throughput_total=float(sum(self.throughput)),
            blocks_mined=list(self.mined),
            blocks_confirmed=list(self.confirmed_blocks),
            forking_rate_per_shard=forks, forking_rate=fr,
            latency=_summary(self.lat_dom + self.lat_cross),
            latency_domestic=_summary(self.lat_dom),
            latency_cross=_summary(self.lat_cross),
            unconfirmed={"domestic": dom_left, "cross": cross_left},
            safety_violations=int(sum(viol)), violations_per_shard=viol,
            divergence_observed=self.divergence_observed,
            divergence_series=self.divergence,
            invalid_confirmed=len(self.invalid_confirmed_nodes),
            atomicity_violations=self._atomicity(),
            quiescent_agreement=self.quiescent_agreement,
            max_honest_delay=self.max_honest_delay,
            delta_global=sim.delta_global,
            shard_delta=list(sim.shard_delta),
            lambda_s=sim.rates.lambda_s, lambda_i=list(sim.rates.lambda_i),
            bytes_by_kind=dict(sorted(self.bytes_by_kind.items())),
            bytes_per_link=dict(sorted(self.bytes_per_link.items())),
            events=sim.events, malformed=self.malformed,
            adversary={"kind": sim.strategy.kind, **sim.strategy.stats(),
                       "invalid_detected_at": {h.hex(): t for h, t in self.detected.items()}},
            trace_digest=trace_digest,
        )
        rep.digest = rep.compute_digest()
        return rep
