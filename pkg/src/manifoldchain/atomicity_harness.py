"""Randomised schedules for the cross-shard commit protocol.

Each shard is a single linear chain that may reorganise its unconfirmed
suffix (at most kappa-1 blocks are replaced by a longer branch, so the
kappa-confirmed prefix never changes and common prefix holds by
construction).  Transactions are real :mod:`core_model` objects and every
decision goes through :mod:`cross_shard`.  The schedule randomises block
production per shard, reorg depth, packaging order, testimony delay (up to
``delta`` steps), testimony loss on first send, and conflicting domestic
spends that force Reject votes.

``check_confirmation=False`` lets output shards act on unconfirmed
testimony units; the suite must catch that mutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core_model import (EMPTY_ROOT, ZERO_HASH, ConsensusBlock, Hash256,
                         HashStubScheme, OutPoint, Testimony, TestimonyUnit,
                         Transaction, TransactionBlock, TxInput, TxKind,
                         TxOutput, Utxo, Vote, address_of, body_roots, hash_of, sha256,
                         sign_transaction)
from .cross_shard import (Decision, ProofOfRejection, RejectReason,
                          cross_id_of, decide_output_tx, make_refund,
                          make_rejection_proof, make_testimony, split_cross_tx,
                          verify_refund)
from .validation import validate_tx, UtxoSet


@dataclass
class HarnessConfig:
    m: int = 4
    kappa: int = 3
    delta: int = 3
    p_block: float = 0.6
    p_fork: float = 0.25
    p_drop: float = 0.3
    p_conflict: float = 0.35
    n_cross: int = 2
    busy_steps: int = 30
    max_steps: int = 400
    check_confirmation: bool = True


@dataclass
class _Block:
    hash: Hash256
    header: ConsensusBlock
    body: TransactionBlock
    state: dict[OutPoint, Utxo]
    legs: frozenset          # (cross_id, kind) packaged on this chain so far


@dataclass
class _Shard:
    index: int
    chain: list[_Block]
    mempool: list = field(default_factory=list)   # (tx, proofs)
    confirmed_len: int = 0


@dataclass
class ScheduleReport:
    seed: int
    atomicity1: int = 0
    atomicity2: int = 0
    conservation: int = 0
    double_materialization: int = 0
    unresolved: int = 0
    rejects: int = 0
    refunds: int = 0
    commits: int = 0

    @property
    def violations(self) -> int:
        return (self.atomicity1 + self.atomicity2 + self.conservation
                + self.double_materialization + self.unresolved)


class _Ctx:
    def __init__(self, sim: "Schedule"):
        self.sim = sim

    def header(self, h):
        b = self.sim.all_blocks.get(h)
        return None if b is None else b.header

    def is_confirmed(self, h):
        b = self.sim.all_blocks.get(h)
        if b is None:
            return False
        sh = self.sim.shards[b.header.shard_index]
        k = self.sim.height[h]
        return k < sh.confirmed_len and sh.chain[k].hash == h

    def deconfirmed_by(self, h):
        b = self.sim.all_blocks.get(h)
        if b is None:
            return None
        sh = self.sim.shards[b.header.shard_index]
        k = self.sim.height[h]
        if k < sh.confirmed_len and sh.chain[k].hash != h:
            return sh.chain[k].hash
        return None


def _block_id(hdr: ConsensusBlock) -> Hash256:
    # single-parent chains: these fields identify the block, and skip the generic encoder
    return sha256(b"".join((hdr.shard_index.to_bytes(4, "big"), hdr.verified_parent,
                            hdr.nonce.to_bytes(8, "big"), hdr.timestamp_us.to_bytes(8, "big"),
                            hdr.tx_merkle_root)))


class Schedule:
    def __init__(self, cfg: HarnessConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.scheme = HashStubScheme()
        self.step = 0
        self.all_blocks: dict[Hash256, _Block] = {}
        self.height: dict[Hash256, int] = {}
        self.inbox: list[tuple[int, int, Testimony]] = []   # (due, shard, testimony)
        self.store: dict[int, dict[Hash256, list[TestimonyUnit]]] = {s: {} for s in range(cfg.m)}
        self.keys: dict[bytes, tuple[bytes, bytes]] = {}
        self.cross: list[Transaction] = []
        self.by_id: dict[Hash256, Transaction] = {}
        self.refund_sent: set[Hash256] = set()
        self.ctx = _Ctx(self)
        self.genesis_total = 0
        self.shards = [self._genesis(s) for s in range(cfg.m)]

    # -- setup ------------------------------------------------------------------

    def _key(self, tag: str) -> bytes:
        secret, public = self.scheme.keygen(f"{self.seed}/{tag}".encode())
        addr = address_of(public)
        self.keys[addr] = (secret, public)
        return addr

    def _genesis(self, s: int) -> _Block:
        state = {}
        for j in range(6):
            addr = self._key(f"owner{s}.{j}")
            u = Utxo(hash_of((b"mint", s, j)), 0, int(self.rng.integers(1, 100)), addr, s)
            state[u.outpoint] = u
            self.genesis_total += u.amount
        hdr = ConsensusBlock(s, ZERO_HASH, (), (), 0, 0, EMPTY_ROOT, EMPTY_ROOT, ZERO_HASH)
        b = _Block(_block_id(hdr), hdr, TransactionBlock(), state, frozenset())
        self.all_blocks[b.hash] = b
        self.height[b.hash] = 0
        return _Shard(s, [b], confirmed_len=1)

    def _make_cross(self, n: int) -> None:
        m = self.cfg.m
        for c in range(n):
            while True:
                in_shards = self.rng.choice(m, size=int(self.rng.integers(1, 3)), replace=False)
                out_shards = self.rng.choice(m, size=int(self.rng.integers(1, 3)), replace=False)
                if len(set(in_shards) | set(out_shards)) > 1:
                    break
            inputs = []
            for s in in_shards:
                live = sorted(self.shards[s].chain[0].state.values(), key=lambda u: u.tx_hash)
                picks = self.rng.choice(len(live), size=int(self.rng.integers(1, 3)), replace=False)
                for p in picks:
                    u = live[int(p)]
                    inputs.append(TxInput(u.outpoint, u.owner_addr, u.amount, int(s)))
            total = sum(i.amount for i in inputs)
            cut = int(self.rng.integers(0, total + 1)) if len(out_shards) > 1 else total
            amounts = [cut, total - cut] if len(out_shards) > 1 else [total]
            outputs = tuple(TxOutput(a, self._key(f"recv{c}.{k}"), int(s))
                            for k, (a, s) in enumerate(zip(amounts, out_shards)))
            tx = sign_transaction(Transaction(tuple(inputs), outputs, TxKind.CROSS,
                                              memo=f"x{c}".encode()), self.keys, self.scheme)
            self.cross.append(tx)
            self.by_id[cross_id_of(tx)] = tx
            ins, outs = split_cross_tx(tx)
            for s, leg in ins.items():
                self.shards[s].mempool.append((leg, ()))
                if self.rng.random() < self.cfg.p_conflict:
                    inp = leg.inputs[int(self.rng.integers(len(leg.inputs)))]
                    dom = sign_transaction(Transaction(
                        (inp,), (TxOutput(inp.amount, self._key(f"thief{c}.{s}"), s),),
                        memo=f"c{c}".encode()), self.keys, self.scheme)
                    self.shards[s].mempool.append((dom, ()))
            for s, leg in outs.items():
                self.shards[s].mempool.append((leg, ()))

    # -- chain mechanics -----------------------------------------------------------

    def _own_leg_vote(self, s: int, cid: Hash256) -> Optional[Vote]:
        sh = self.shards[s]
        for b in sh.chain[:sh.confirmed_len]:
            for tx, lab in zip(b.body.txs, b.body.labels):
                if tx.kind is TxKind.CROSS_INPUT and tx.cross_id == cid:
                    return lab
        return None

    def _testimony_for(self, s: int, cid: Hash256) -> Optional[Testimony]:
        units = self.store[s].get(cid)
        return Testimony(cid, tuple(units)) if units else None

    def _build(self, sh: _Shard, parent: _Block) -> _Block:
        state = dict(parent.state)
        legs = set(parent.legs)
        txs, labels = [], []
        keep = []
        order = self.rng.permutation(len(sh.mempool))
        view = UtxoSet(sh.index, state)
        for i in order:
            tx, proofs = sh.mempool[int(i)]
            key = (tx.cross_id, tx.kind)
            if tx.kind is TxKind.DOMESTIC:
                if validate_tx(tx, view, scheme=self.scheme):
                    for inp in tx.inputs:
                        del state[inp.ref]
                    self._create(state, tx)
                    txs.append(tx)
                    labels.append(Vote.ACCEPT)
                else:
                    keep.append((tx, proofs))     # may become valid on another branch
                continue
            if key in legs:
                keep.append((tx, proofs))
                continue
            if tx.kind is TxKind.CROSS_INPUT:
                ok = bool(validate_tx(tx, view, scheme=self.scheme))
                if ok:
                    for inp in tx.inputs:
                        del state[inp.ref]
                lab = Vote.ACCEPT if ok else Vote.REJECT
            elif tx.kind is TxKind.CROSS_OUTPUT:
                d = decide_output_tx(tx, self._testimony_for(sh.index, tx.cross_id), self.ctx,
                                     self.cfg.check_confirmation)
                if d is Decision.DEFER:
                    keep.append((tx, proofs))
                    continue
                lab = Vote.ACCEPT if d is Decision.ACCEPT else Vote.REJECT
                if lab is Vote.ACCEPT:
                    self._create(state, tx)
            else:
                d = verify_refund(tx, proofs, self.ctx, self._own_leg_vote(sh.index, tx.cross_id))
                if d is not Decision.ACCEPT:
                    keep.append((tx, proofs))
                    continue
                lab = Vote.ACCEPT
                self._create(state, tx)
            legs.add(key)
            txs.append(tx)
            labels.append(lab)
            keep.append((tx, proofs))   # stays pooled in case this block is reorganised away
        sh.mempool = keep
        body = TransactionBlock(tuple(txs), tuple(labels))
        tx_root, tmy_root = body_roots(body)
        hdr = ConsensusBlock(sh.index, parent.hash, (parent.hash,), ((sh.index, parent.hash),),
                             self.step, int(self.rng.integers(0, 1 << 62)), tx_root, tmy_root,
                             ZERO_HASH)
        b = _Block(_block_id(hdr), hdr, body, state, frozenset(legs))
        self.all_blocks[b.hash] = b
        self.height[b.hash] = self.height[parent.hash] + 1
        for tx, lab in zip(txs, labels):
            if tx.kind is TxKind.CROSS_INPUT:
                self._send_testimony(tx, b, drop=True)
        return b

    def _create(self, state: dict, tx: Transaction) -> None:
        h = hash_of(tx)
        for idx, o in enumerate(tx.outputs):
            u = Utxo(h, idx, o.amount, o.receiver_addr, o.shard)
            state[u.outpoint] = u

    def _send_testimony(self, leg: Transaction, b: _Block, drop: bool) -> None:
        t = make_testimony(leg, b.hash, b.body)
        cross = self.by_id[leg.cross_id]
        for o in sorted(cross.receiver_shards()):
            if drop and self.rng.random() < self.cfg.p_drop:
                continue
            due = self.step + int(self.rng.integers(0, self.cfg.delta + 1))
            self.inbox.append((due, o, t))

    def _deliver(self) -> None:
        keep = []
        for due, o, t in self.inbox:
            if due <= self.step:
                lst = self.store[o].setdefault(t.cross_id, [])
                for u in t.units:
                    if u not in lst:
                        lst.append(u)
            else:
                keep.append((due, o, t))
        self.inbox = keep

    def _advance(self, sh: _Shard, allow_fork: bool) -> None:
        k = self.cfg.kappa
        unconfirmed = len(sh.chain) - sh.confirmed_len
        if allow_fork and unconfirmed >= 1 and self.rng.random() < self.cfg.p_fork:
            r = int(self.rng.integers(1, min(k - 1, unconfirmed) + 1))
            del sh.chain[-r:]
            for _ in range(r + 1):
                sh.chain.append(self._build(sh, sh.chain[-1]))
        else:
            sh.chain.append(self._build(sh, sh.chain[-1]))
        new_len = max(1, len(sh.chain) - k + 1)
        for b in sh.chain[sh.confirmed_len:new_len]:
            for tx in b.body.txs:
                if tx.kind is TxKind.CROSS_INPUT:
                    self._send_testimony(tx, b, drop=False)
        if new_len < sh.confirmed_len:
            raise AssertionError("confirmed prefix shrank")
        sh.confirmed_len = new_len

    # -- user-side refunds -----------------------------------------------------------

    def _confirmed_leg(self, s: int, cid: Hash256, kind: TxKind):
        sh = self.shards[s]
        for b in sh.chain[:sh.confirmed_len]:
            for idx, (tx, lab) in enumerate(zip(b.body.txs, b.body.labels)):
                if tx.kind is kind and tx.cross_id == cid:
                    return b, tx, lab
        return None

    def _maybe_refund(self, tx: Transaction) -> None:
        cid = cross_id_of(tx)
        if cid in self.refund_sent:
            return
        ins, outs = split_cross_tx(tx)
        votes = {}
        for s in ins:
            got = self._confirmed_leg(s, cid, TxKind.CROSS_INPUT)
            if got is None:
                return
            votes[s] = got
        out_hits = {}
        for s in outs:
            got = self._confirmed_leg(s, cid, TxKind.CROSS_OUTPUT)
            if got is None or got[2] is not Vote.REJECT:
                return
            out_hits[s] = got
        rejecting = [(s, v) for s, v in votes.items() if v[2] is Vote.REJECT]
        if rejecting:
            s, (b, leg, _) = rejecting[0]
            tes_i = make_testimony(leg, b.hash, b.body).units[0]
            reason = RejectReason.REJECT_VOTE
        else:
            s, (b, leg, _) = next(iter(votes.items()))
            tes_i = make_testimony(leg, b.hash, b.body).units[0]
            reason = RejectReason.INVALID_TESTIMONY
        proofs = [make_rejection_proof(ol, ob.hash, ob.body, tes_i, reason)
                  for _, (ob, ol, _) in out_hits.items()]
        refunds, proofs = make_refund(tx, {s: v[2] for s, v in votes.items()},
                                      {s: True for s in outs}, proofs)
        for s, r in refunds.items():
            self.shards[s].mempool.append((r, proofs))
        self.refund_sent.add(cid)

    # -- run --------------------------------------------------------------------------

    def _resolved(self) -> bool:
        for tx in self.cross:
            cid = cross_id_of(tx)
            ins, outs = split_cross_tx(tx)
            iv = {s: self._confirmed_leg(s, cid, TxKind.CROSS_INPUT) for s in ins}
            ov = {s: self._confirmed_leg(s, cid, TxKind.CROSS_OUTPUT) for s in outs}
            if any(v is None for v in iv.values()) or any(v is None for v in ov.values()):
                return False
            if all(v[2] is Vote.REJECT for v in ov.values()):
                for s, v in iv.items():
                    if v[2] is Vote.ACCEPT and self._confirmed_leg(s, cid, TxKind.REFUND) is None:
                        return False
        return True

    def run(self) -> ScheduleReport:
        cfg = self.cfg
        self._make_cross(cfg.n_cross)
        while self.step < cfg.max_steps:
            self.step += 1
            self._deliver()
            busy = self.step <= cfg.busy_steps
            for s in self.rng.permutation(cfg.m):
                if self.rng.random() < cfg.p_block:
                    self._advance(self.shards[int(s)], allow_fork=busy)
            for tx in self.cross:
                self._maybe_refund(tx)
            if not busy and not self.inbox and self._resolved():
                break
        return self._audit()

    def _audit(self) -> ScheduleReport:
        rep = ScheduleReport(self.seed)
        for tx in self.cross:
            cid = cross_id_of(tx)
            ins, outs = split_cross_tx(tx)
            iv = {s: self._confirmed_leg(s, cid, TxKind.CROSS_INPUT) for s in ins}
            ov = {s: self._confirmed_leg(s, cid, TxKind.CROSS_OUTPUT) for s in outs}
            rv = {s: self._confirmed_leg(s, cid, TxKind.REFUND) for s in ins}
            if any(v is None for v in iv.values()) or any(v is None for v in ov.values()):
                rep.unresolved += 1
                continue
            in_votes = [v[2] for v in iv.values()]
            out_votes = [v[2] for v in ov.values()]
            if all(v is Vote.ACCEPT for v in in_votes):
                rep.commits += 1
                if any(v is not Vote.ACCEPT for v in out_votes):
                    rep.atomicity1 += 1
            else:
                rep.rejects += 1
                if any(v is not Vote.REJECT for v in out_votes):
                    rep.atomicity2 += 1
                for s, v in iv.items():
                    if v[2] is Vote.ACCEPT and rv[s] is None:
                        rep.atomicity2 += 1
            if any(r is not None for r in rv.values()):
                rep.refunds += 1
                if any(v is Vote.ACCEPT for v in out_votes):
                    rep.double_materialization += 1
        total = 0
        for sh in self.shards:
            tip = sh.chain[sh.confirmed_len - 1]
            total += sum(u.amount for u in tip.state.values())
        if total != self.genesis_total:
            rep.conservation += 1
        return rep


def run_schedule(seed: int, cfg: Optional[HarnessConfig] = None) -> ScheduleReport:
    return Schedule(cfg or HarnessConfig(), seed).run()


def run_suite(n: int, cfg: Optional[HarnessConfig] = None, first_seed: int = 0) -> list[ScheduleReport]:
    return [run_schedule(first_seed + i, cfg) for i in range(n)]
