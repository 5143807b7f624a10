"""Deterministic discrete-event loop hosting the nodes."""

from __future__ import annotations

import hashlib
import heapq
import math
import struct
from typing import Optional

import numpy as np

from ..core_model import (ConsensusBlock, Hash256, HashStubScheme, Transaction,
                          TransactionBlock, TxKind, hash_of, merkle_verify,
                          seconds_to_us, body_roots)
from ..cross_shard import make_testimony, split_cross_tx
from ..pow_engine import block_hash, grind, shard_difficulties
from ..validation import ChunkWithProof, FraudProof, chunk_leaf, encode_body, sample_indices
from .adversary import make_strategy
from .config import ConfigInvalid, Resolved, Scenario, resolve
from .metrics import Metrics, MetricsReport
from .node import Node
from .workload import TxGenerator

EV_MINE, EV_MSG, EV_TIMER, EV_TXGEN, EV_SAMPLE = range(5)
M_HEADER, M_BODY, M_SAMPLE, M_FRAUD, M_TX, M_TESTIMONY = range(6)
MSG_NAMES = ("header", "body", "sample", "fraud_proof", "tx", "testimony")
CLIENT = -1
REQUEST_B = 64.0


class SynchronyViolation(AssertionError):
    pass


class Simulation:
    def __init__(self, resolved: Resolved):
        self.res = resolved
        self.scenario: Scenario = resolved.scenario
        sc = self.scenario
        self.m = sc.m
        self.dm = sc.delay
        self.seed = resolved.seed
        self.rates = resolved.rates
        if all(self.rates.lambda_s + li <= 0 for li in self.rates.lambda_i):
            raise ConfigInvalid("all mining rates are zero")
        try:
            self.difficulties = shard_difficulties(self.rates.lambda_s, self.rates.lambda_i)
        except ValueError as e:
            raise ConfigInvalid(f"mining rates unusable: {e}") from None
        self.shard_rate = [self.rates.lambda_s + li for li in self.rates.lambda_i]
        self.shard_delta = list(self.rates.delta_i)
        self.delta_global = resolved.delta_global
        ss = np.random.SeedSequence([self.seed, 20_24])
        kids = ss.spawn(5 + self.m)
        self.rng_winner = np.random.default_rng(kids[0])
        self.rng_grind = np.random.default_rng(kids[1])
        self.rng_tx = np.random.default_rng(kids[2])
        self.rng_sample = np.random.default_rng(kids[3])
        self.rng_adv = np.random.default_rng(kids[4])
        self.rng_mine = [np.random.default_rng(k) for k in kids[5:]]
        self.scheme = HashStubScheme()
        self.generator = TxGenerator(self.m, sc.workload, self.rng_tx, self.scheme)
        self.members = resolved.shard_members
        self.nodes = [Node(self, spec) for spec in resolved.nodes]
        for g in self.members:
            honest = [i for i in g if self.nodes[i].honest]
            self.nodes[min(honest)].is_reference = True
        self.reference = [min(i for i in g if self.nodes[i].honest) for g in self.members]
        self._weights = []
        for g in self.members:
            w = np.array([self.nodes[i].spec.hash_power_share for i in g], dtype=float)
            self._weights.append(w / w.sum() if w.sum() > 0 else np.full(len(g), 1 / len(g)))
        self.strategy = make_strategy(sc.adversary, self)
        self.metrics = Metrics(self)
        self.inclusive: dict[Hash256, bool] = {}
        self.info: dict[Hash256, tuple] = {}          # h -> (shard, producer, honest, t, n_tx)
        self._heap: list = []
        self._seq = 0
        self.now = 0.0
        self.t_end = float(sc.duration)
        self.mining_on = True
        self._trace = hashlib.sha256()
        self._keys: dict[int, tuple[Transaction, Hash256]] = {}
        self._chunk_ok: dict[tuple[Hash256, int], bool] = {}
        self._pow: dict[Hash256, bool] = {}
        self.events = 0

    # -- helpers ---------------------------------------------------------------

    def key_of(self, tx: Transaction) -> Hash256:
        hit = self._keys.get(id(tx))
        if hit is not None and hit[0] is tx:
            return hit[1]
        k = hash_of(tx)
        self._keys[id(tx)] = (tx, k)
        return k

    def pow_ok(self, h: Hash256, header: ConsensusBlock) -> bool:
        ok = self._pow.get(h)
        if ok is None:
            d = self.difficulties[header.shard_index] if 0 <= header.shard_index < self.m else None
            ok = d is not None and block_hash(header) == h and h.as_int() < d.sigma
            self._pow[h] = ok
        return ok

    def chunk_ok(self, h: Hash256, root: Hash256, c: ChunkWithProof) -> bool:
        key = (h, c.index)
        ok = self._chunk_ok.get(key)
        if ok is None:
            ok = merkle_verify(root, chunk_leaf(c.index, c.chunk), c.proof)
            self._chunk_ok[key] = ok
        return ok

    def sample_indices(self, k: int) -> tuple[int, ...]:
        return sample_indices(self.rng_sample, k)

    # -- scheduling ----------------------------------------------------------------

    def _push(self, t: float, kind: int, target: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, target, payload))

    def timer(self, t: float, node: Node, kind: str, h: Hash256) -> None:
        self._push(t, EV_TIMER, node.id, (kind, h))

    def send(self, sender: int, to: list[int], mtype: int, payload, size_B: float,
             now: float, extra: float = 0.0) -> None:
        """Deliver one message to each recipient after the link delay."""
        dm = self.dm
        bw_from = math.inf if sender == CLIENT else self.nodes[sender].bw
        honest_sender = sender == CLIENT or self.nodes[sender].honest
        slack = self.scenario.adversarial_delay
        for r in to:
            node = self.nodes[r]
            d = dm.delay(size_B, bw_from, node.bw) + extra
            if honest_sender and slack > 0 and d < self.delta_global:
                d += slack * (self.delta_global - d)
            if honest_sender and node.honest:
                if d > self.delta_global + 1e-9:
                    raise SynchronyViolation(f"{MSG_NAMES[mtype]} took {d:.6f}s > {self.delta_global:.6f}s")
                self.metrics.max_honest_delay = max(self.metrics.max_honest_delay, d)
            self.metrics.count_bytes(sender, r, mtype, size_B)
            self._push(now + d, EV_MSG, r, (mtype, payload, sender))

    # -- block production --------------------------------------------------------------

    def seal_and_publish(self, node: Node, vp: Hash256, own: tuple, glob: tuple,
                         body: TransactionBlock, keys: list[Hash256], now: float,
                         publish: bool = True, body_to: Optional[list[int]] = None) -> Hash256:
        header, h, coded = self.seal(node, vp, own, glob, body, now)
        node.own_blocks.add(h)
        node.produced[h] = coded
        node.ledger.register(h, header)
        node.mc.insert_block(header, body, now, inclusive=self.inclusive[h], block_id=h)
        node.ledger.record(h, body, keys)
        if publish:
            self.publish(node, h, header, body, coded, now, body_to)
        node.after_change()
        return h

    def seal(self, node: Node, vp: Hash256, own: tuple, glob: tuple, body: TransactionBlock,
             now: float):
        tx_root, tmy_root = body_roots(body)
        coded = encode_body(body)
        header = ConsensusBlock(node.shard, vp, own, glob, seconds_to_us(now), 0,
                                tx_root, tmy_root, coded.commitment_root)
        diff = self.difficulties[node.shard]
        header = grind(header, diff, self.rng_grind)
        h = block_hash(header)
        self._pow[h] = True
        self.inclusive[h] = h.as_int() < diff.sigma_prime
        self.info[h] = (node.shard, node.id, node.honest, now, body.tx_count())
        self.metrics.on_block(node, h, header, self.inclusive[h], now)
        return header, h, coded

    def body_size(self, body: TransactionBlock) -> float:
        units = sum(len(t.units) for t in body.testimonies)
        return self.dm.body_B(body.tx_count(), units)

    def publish(self, node: Node, h: Hash256, header: ConsensusBlock, body: TransactionBlock,
                coded, now: float, body_to: Optional[list[int]] = None) -> None:
        others = [i for i in range(len(self.nodes)) if i != node.id]
        self.send(node.id, others, M_HEADER, (h, header, coded.k), self.dm.header_B, now)
        if body_to is None:
            body_to = [i for i in self.members[node.shard] if i != node.id]
        if body_to:
            self.send(node.id, body_to, M_BODY, (h, body), self.body_size(body), now)
        self.send_testimonies(node, h, body, now)

    def send_testimonies(self, node: Node, h: Hash256, body: TransactionBlock, now: float) -> None:
        for tx in body.txs:
            if tx.kind is not TxKind.CROSS_INPUT:
                continue
            parent = node.cross.get(tx.cross_id)
            if parent is None:
                continue
            t = make_testimony(tx, h, body)
            _, outs = split_cross_tx(parent)
            to = [i for s in outs for i in self.members[s] if i != node.id]
            self.send(node.id, to, M_TESTIMONY, t, len(t.units) * self.dm.testimony_unit_B, now)

    def request_samples(self, node: Node, producer: int, h: Hash256, indices, now: float) -> None:
        dm = self.dm
        pnode = self.nodes[producer]
        self.metrics.count_bytes(node.id, producer, M_SAMPLE, REQUEST_B)
        coded = pnode.produced.get(h)
        if coded is None or not self.strategy.answers_samples(pnode, h):
            return
        d_req = dm.delay(REQUEST_B, node.bw, pnode.bw)
        proofs = pnode.produced.get(("proofs", h))
        if proofs is None:
            proofs = coded.all_with_proofs()
            pnode.produced[("proofs", h)] = proofs
        chunks = tuple(proofs[i] for i in indices)
        info = self.info[h]
        size = dm.sample_response_B(dm.body_B(info[4], 0), len(indices))
        self.send(producer, [node.id], M_SAMPLE, (h, chunks), size, now, extra=d_req)

    def broadcast_fraud(self, node: Node, proof: FraudProof, now: float) -> None:
        size = 2 * self.dm.tx_B + 2 * self.dm.header_B
        others = [i for i in range(len(self.nodes)) if i != node.id]
        self.send(node.id, others, M_FRAUD, proof, size, now)

    # -- workload ------------------------------------------------------------------------

    def _gen_tx(self, now: float) -> None:
        utx = self.generator.make(now)
        self.metrics.on_tx_created(utx)
        size = self.dm.tx_B
        if not utx.cross:
            self.send(CLIENT, self.members[utx.in_shards[0]], M_TX, (utx.tx, None), size, now)
            return
        ins, outs = split_cross_tx(utx.tx)
        for s, leg in ins.items():
            self.send(CLIENT, self.members[s], M_TX, (leg, utx.tx), size, now)
        for s, leg in outs.items():
            self.send(CLIENT, self.members[s], M_TX, (leg, utx.tx), size, now)

    # -- main loop ---------------------------------------------------------------------

    def _schedule_mine(self, s: int, t: float) -> None:
        rate = self.shard_rate[s]
        if rate <= 0:
            return
        t2 = t + float(self.rng_mine[s].exponential(1.0 / rate))
        if t2 <= self.t_end:
            self._push(t2, EV_MINE, s, None)

    def _on_mine(self, s: int, now: float) -> None:
        g = self.members[s]
        w = self._weights[s]
        winner = self.nodes[g[int(self.rng_winner.choice(len(g), p=w))]] if len(g) > 1 else self.nodes[g[0]]
        if not self.strategy.on_mine(winner, now):
            winner.mine(now)
        self._schedule_mine(s, now)

    def _dispatch_msg(self, node: Node, payload, now: float) -> None:
        mtype, data, sender = payload
        if mtype == M_HEADER:
            h, header, k = data
            node.on_header(h, header, k, sender, now)
        elif mtype == M_BODY:
            node.on_body(data[0], data[1], now)
        elif mtype == M_SAMPLE:
            node.on_sample(data[0], data[1], now)
        elif mtype == M_FRAUD:
            node.on_fraud(data, now)
        elif mtype == M_TX:
            node.on_tx(data[0], data[1])
        elif mtype == M_TESTIMONY:
            node.on_testimony(data)

    def run(self) -> MetricsReport:
        for s in range(self.m):
            self._schedule_mine(s, 0.0)
        wl_end = self.t_end - self.scenario.workload.stop_before
        if self.generator.total_rate > 0:
            t0 = self.generator.next_gap()
            if t0 < wl_end:
                self._push(t0, EV_TXGEN, -1, None)
        t = self.scenario.sample_interval
        while t < self.t_end:
            self._push(t, EV_SAMPLE, -1, None)
            t += self.scenario.sample_interval
        self._push(self.t_end, EV_SAMPLE, -2, None)
        self.strategy.setup(self)
        heap = self._heap
        pack = struct.Struct("<dqbi").pack
        trace = self._trace
        while heap:
            t, seq, kind, target, payload = heapq.heappop(heap)
            self.now = t
            self.events += 1
            trace.update(pack(t, seq, kind, target))
            if kind == EV_MSG:
                self._dispatch_msg(self.nodes[target], payload, t)
            elif kind == EV_MINE:
                self._on_mine(target, t)
            elif kind == EV_TIMER:
                self.nodes[target].on_timer(payload[0], payload[1], t)
            elif kind == EV_TXGEN:
                self._gen_tx(t)
                t2 = t + self.generator.next_gap()
                if t2 < wl_end:
                    self._push(t2, EV_TXGEN, -1, None)
            elif kind == EV_SAMPLE:
                self.strategy.on_tick(self, t)
                self.metrics.sample(t, final=target == -2)
            else:
                raise RuntimeError(f"unknown event kind {kind}")
        self.metrics.sample(self.now, final=False, quiescent=True)
        return self.metrics.report(self._trace.hexdigest())


def run(scenario: Scenario | dict, seed: int) -> MetricsReport:
    """Simulate one scenario under one seed."""
    sc = scenario if isinstance(scenario, Scenario) else Scenario.from_dict(scenario)
    return Simulation(resolve(sc, seed)).run()
