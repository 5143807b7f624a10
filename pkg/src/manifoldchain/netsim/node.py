"""Honest node state machine: mempool, miner and networker for one miner."""

from __future__ import annotations

from typing import TYPE_CHECKING, Optional

from ..core_model import (ConsensusBlock, Hash256, Testimony, Transaction,
                          TransactionBlock, TxKind, Vote, hash_of)
from ..cross_shard import (Decision, TestimonyVerdict, combine, decide_output_tx,
                           parent_of, verify_testimony)
from ..multichain import (BodyRootMismatch, ConfirmedTracker, Multichain,
                          OrphanNoKnownParent, Status, genesis_hash)
from ..validation import (FraudProof, UnknownBlockHeader, Verdict, make_fraud_proof,
                          stateless_fault, verify_fraud_proof)
from .config import NodeSpec
from .ledger import ShardLedger, header_lineage_ancestor

if TYPE_CHECKING:
    from .sim import Simulation


class _Session:
    __slots__ = ("root", "indices", "got", "ok")

    def __init__(self, root: Hash256, indices: tuple[int, ...]):
        self.root = root
        self.indices = indices
        self.got: set[int] = set()
        self.ok = False


class NodeContext:
    """ChainContext over one node's own views and confirmed sets."""

    def __init__(self, node: "Node"):
        self.node = node

    def header(self, h: Hash256) -> Optional[ConsensusBlock]:
        return self.node.mc.headers.get(h)

    def is_confirmed(self, h: Hash256) -> bool:
        hdr = self.node.mc.headers.get(h)
        return hdr is not None and h in self.node.cset[hdr.shard_index]

    def deconfirmed_by(self, h: Hash256) -> Optional[Hash256]:
        hdr = self.node.mc.headers.get(h)
        idx = self.node.ever_index.get(h)
        if hdr is None or idx is None:
            return None
        conf = self.node.trackers[hdr.shard_index].confirmed
        if idx < len(conf) and conf[idx] != h:
            return conf[idx]
        return None


class Node:
    def __init__(self, sim: "Simulation", spec: NodeSpec):
        self.sim = sim
        self.spec = spec
        self.id = spec.id
        self.shard = spec.shard
        self.bw = spec.bandwidth_mbps
        self.honest = spec.honest
        self.is_reference = False
        sc = sim.scenario
        self.mc = Multichain(sc.m, self.shard, sc.kappa, sim.difficulties,
                             first_seen_ties=not sc.validation,
                             body_validator=self._validate)
        self.ledger = ShardLedger(self.shard, genesis_hash(self.shard), sim.generator.genesis.outputs)
        self.mempool: dict[Hash256, Transaction] = {}
        self.out_legs: dict[Hash256, Transaction] = {}
        self.tmy: dict[Hash256, Testimony] = {}
        self.cross: dict[Hash256, Transaction] = {}
        self.trackers = [ConfirmedTracker(v) for v in self.mc.views]
        for s, tr in enumerate(self.trackers):
            tr.on_confirm = (lambda h, i, s=s: self._on_confirm(s, h, i))
        self.cset: list[set[Hash256]] = [set() for _ in range(sc.m)]
        self.ever_index: dict[Hash256, int] = {}
        self.sessions: dict[Hash256, _Session] = {}
        self.awaiting_body: set[Hash256] = set()
        self.early_bodies: dict[Hash256, TransactionBlock] = {}
        self.fraud_seen: set[Hash256] = set()
        self.own_blocks: set[Hash256] = set()
        self.produced: dict[Hash256, object] = {}
        self.ctx = NodeContext(self)
        self._fraud: Optional[FraudProof] = None

    # -- confirmation tracking -------------------------------------------------

    def refresh(self, s: int) -> None:
        tr = self.trackers[s]
        before = tr.violations
        tr.update()
        if tr.violations != before:
            self.cset[s] = set(tr.confirmed)
            if s == self.shard:
                self.sim.metrics.on_rollback(self)

    def refresh_all(self) -> None:
        for s in range(self.sim.m):
            self.refresh(s)

    def _on_confirm(self, s: int, h: Hash256, idx: int) -> None:
        self.cset[s].add(h)
        self.ever_index[h] = idx
        if s != self.shard:
            return
        body = self.ledger.bodies.get(h)
        if body is None:
            return
        for tx in body.txs:
            if tx.kind is TxKind.CROSS_OUTPUT:
                self.out_legs.pop(tx.cross_id, None)
            else:
                self.mempool.pop(self.sim.key_of(tx), None)
        if self.is_reference:
            self.sim.metrics.on_reference_confirm(self, h, body)

    # -- body validation -------------------------------------------------------

    def _validate(self, mc: Multichain, h: Hash256, header: ConsensusBlock,
                  body: TransactionBlock) -> bool:
        if h in self.own_blocks:
            return True
        ok = self.check_body(header, body)
        if not ok:
            base = header.parents_for(self.shard)[0]
            self._fraud = make_fraud_proof(body, h, self.ledger.view_at(base), self.sim.scheme)
        return ok

    def check_body(self, header: ConsensusBlock, body: TransactionBlock) -> bool:
        ps = header.parents_for(self.shard)
        if not ps or len(body.labels) != len(body.txs):
            return False
        base = ps[0]
        led = self.ledger
        genesis = led.genesis
        seen = set()
        tmap = {t.cross_id: t for t in body.testimonies}
        for tx, label in zip(body.txs, body.labels):
            kind = tx.kind
            if kind is TxKind.DOMESTIC or kind is TxKind.CROSS_INPUT:
                if label is Vote.REJECT:
                    if kind is TxKind.DOMESTIC:
                        return False
                    continue
                if stateless_fault(tx, self.sim.scheme) is not None:
                    return False
                for inp in tx.inputs:
                    u = genesis.get(inp.ref)
                    if (inp.shard != self.shard or u is None or u.owner_addr != inp.payer_addr
                            or u.amount != inp.amount or inp.ref in seen
                            or led.spender_on_chain(inp.ref, base) is not None):
                        return False
                    seen.add(inp.ref)
            elif kind is TxKind.CROSS_OUTPUT:
                if stateless_fault(tx, self.sim.scheme) is not None:
                    return False
                if led.included_on_chain(self.sim.key_of(tx), base):
                    return False
                t = tmap.get(tx.cross_id)
                if t is None:
                    return False
                if verify_testimony(t, parent_of(tx), self.ctx,
                                    check_confirmation=False) is TestimonyVerdict.INVALID_PROOF:
                    return False
            else:
                return False
        return True

    # -- mining ----------------------------------------------------------------

    def package(self, tip: Hash256) -> tuple[TransactionBlock, list[Hash256]]:
        sim = self.sim
        dm = sim.dm
        # byte budget in transaction slots; testimony units take slots too
        room = float(dm.txs_per_block)
        unit_slots = dm.testimony_unit_B / dm.tx_B
        led = self.ledger
        txs, labels, tmys, keys = [], [], [], []
        used = set()
        for key, tx in list(self.mempool.items()):
            if room < 1:
                break
            if led.included_on_chain(key, tip):
                continue
            label = Vote.ACCEPT
            if any(i.ref in used or led.spender_on_chain(i.ref, tip) is not None for i in tx.inputs):
                if tx.kind is TxKind.DOMESTIC:
                    continue
                label = Vote.REJECT
            else:
                used.update(i.ref for i in tx.inputs)
            txs.append(tx)
            labels.append(label)
            keys.append(key)
            room -= 1
        for cid, leg in list(self.out_legs.items()):
            if room < 1:
                break
            key = sim.key_of(leg)
            if led.included_on_chain(key, tip):
                continue
            t = self.tmy.get(cid)
            d = decide_output_tx(leg, t, self.ctx)
            if d is Decision.DEFER:
                continue
            cost = 1 + (len(t.units) if t is not None else 0) * unit_slots
            if cost > room:
                continue
            room -= cost
            txs.append(leg)
            labels.append(Vote.ACCEPT if d is Decision.ACCEPT else Vote.REJECT)
            keys.append(key)
            if t is not None:
                tmys.append(t)
        filler = int(room) if sim.scenario.workload.saturate else 0
        return TransactionBlock(tuple(txs), tuple(labels), tuple(tmys), filler), keys

    def mine(self, now: float) -> Hash256:
        self.refresh_all()
        vp, own, glob = self.mc.parent_sets()
        body, keys = self.package(vp)
        return self.sim.seal_and_publish(self, vp, own, glob, body, keys, now)

    # -- message handlers --------------------------------------------------------

    def on_tx(self, tx: Transaction, parent: Optional[Transaction]) -> None:
        if tx.kind is TxKind.CROSS_OUTPUT:
            self.out_legs.setdefault(tx.cross_id, tx)
        else:
            self.mempool.setdefault(self.sim.key_of(tx), tx)
        if parent is not None:
            self.cross[tx.cross_id] = parent

    def on_testimony(self, t: Testimony) -> None:
        old = self.tmy.get(t.cross_id)
        self.tmy[t.cross_id] = t if old is None else combine((old, t))

    def on_header(self, h: Hash256, header: ConsensusBlock, k: int, producer: int,
                  now: float) -> None:
        sim = self.sim
        if h in self.mc.headers:
            return
        if not sim.pow_ok(h, header):
            sim.metrics.malformed += 1
            return
        self.ledger.register(h, header)
        try:
            self.mc.insert_block(header, None, now, inclusive=sim.inclusive[h], block_id=h,
                                 pending_body_ok=True)
        except OrphanNoKnownParent:
            pass
        if header.shard_index == self.shard:
            body = self.early_bodies.pop(h, None)
            if body is not None:
                self.attach(h, body, now)
            else:
                self.awaiting_body.add(h)
                sim.timer(now + 2 * sim.shard_delta[self.shard], self, "body", h)
        elif not sim.scenario.validation:
            self.mc.mark_verified(h, now)
        else:
            idx = sim.sample_indices(k)
            self.sessions[h] = _Session(header.availability_commitment, idx)
            sim.request_samples(self, producer, h, idx, now)
            sim.timer(now + 2 * sim.shard_delta[header.shard_index], self, "sample", h)
        self.after_change()

    def on_body(self, h: Hash256, body: TransactionBlock, now: float) -> None:
        if h not in self.mc.headers:
            self.early_bodies[h] = body
            return
        if h in self.awaiting_body:
            self.attach(h, body, now)
            self.after_change()

    def attach(self, h: Hash256, body: TransactionBlock, now: float) -> None:
        self.awaiting_body.discard(h)
        if self.mc.status[h] is Status.INVALID:
            return
        self._fraud = None
        try:
            self.mc.attach_body(h, body, now)
        except BodyRootMismatch:
            self.sim.metrics.malformed += 1
            return
        if self.mc.status[h] is Status.INVALID:
            self.sim.metrics.on_invalid_detected(self, h, now)
            if self._fraud is not None and h not in self.fraud_seen:
                self.fraud_seen.add(h)
                self.sim.broadcast_fraud(self, self._fraud, now)
        else:
            self.ledger.record(h, body)

    def on_sample(self, h: Hash256, chunks, now: float) -> None:
        sess = self.sessions.get(h)
        if sess is None or sess.ok:
            return
        for c in chunks:
            if c.index in sess.indices and self.sim.chunk_ok(h, sess.root, c):
                sess.got.add(c.index)
        if len(sess.got) == len(set(sess.indices)):
            sess.ok = True
            if self.mc.status.get(h) is not Status.INVALID:
                self.mc.apply_verdict(h, Verdict.AVAILABLE, now)

    def on_timer(self, kind: str, h: Hash256, now: float) -> None:
        st = self.mc.status.get(h)
        if kind == "body":
            if h in self.awaiting_body:
                self.awaiting_body.discard(h)
                if st is not Status.INVALID:
                    self.mc.apply_verdict(h, Verdict.UNAVAILABLE, now)
        elif kind == "sample":
            sess = self.sessions.pop(h, None)
            if sess is None or st is Status.INVALID:
                return
            if sess.ok and h not in self.fraud_seen:
                self.mc.apply_verdict(h, Verdict.VALID_TXS, now)
            else:
                self.mc.apply_verdict(h, Verdict.UNAVAILABLE, now)
        self.after_change()

    def on_fraud(self, proof: FraudProof, now: float) -> None:
        if not self.sim.scenario.validation:
            return
        h = proof.item0.block_hash
        if h in self.fraud_seen:
            return
        headers = self.mc.headers
        hdr = headers.get(h)
        if hdr is None:
            return
        shard = hdr.shard_index
        try:
            ok = verify_fraud_proof(proof, headers, self.sim.scheme,
                                    lambda a, d: header_lineage_ancestor(headers, shard, a, d))
        except UnknownBlockHeader:
            ok = False
        if not ok:
            return
        self.fraud_seen.add(h)
        if self.mc.status[h] is not Status.INVALID:
            self.mc.apply_verdict(h, Verdict.FRAUD_PROVEN, now)
        self.sessions.pop(h, None)
        self.after_change()

    def after_change(self) -> None:
        if self.is_reference:
            self.refresh(self.shard)
