"""Fork-aware spend index for one shard, as kept by each node.

Ancestry follows the first listed parent of the shard (the miner's
verified tip), which every block carrying this shard's parents has.  A
spend or inclusion counts against a block only when it sits on that
block's own ancestry, so competing forks never see each other's spends.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

from ..core_model import (ConsensusBlock, Hash256, OutPoint, Transaction,
                          TransactionBlock, TxKind, Utxo, Vote, hash_of)
from ..validation import SpendRecord


@dataclass
class ShardLedger:
    shard: int
    genesis_hash: Hash256
    genesis: Mapping[OutPoint, Utxo]
    lparent: dict[Hash256, Hash256] = field(default_factory=dict)
    lheight: dict[Hash256, int] = field(default_factory=dict)
    spends: dict[OutPoint, list[tuple[Hash256, Transaction, Vote]]] = field(default_factory=dict)
    included: dict[Hash256, list[Hash256]] = field(default_factory=dict)
    bodies: dict[Hash256, TransactionBlock] = field(default_factory=dict)

    def __post_init__(self):
        self.lheight[self.genesis_hash] = 0

    def register(self, h: Hash256, header: ConsensusBlock) -> None:
        ps = header.parents_for(self.shard)
        if ps and h not in self.lparent:
            self.lparent[h] = ps[0]

    def height(self, h: Hash256) -> Optional[int]:
        hh = self.lheight.get(h)
        if hh is not None:
            return hh
        path = []
        x = h
        while hh is None:
            p = self.lparent.get(x)
            if p is None:
                return None
            path.append(x)
            x = p
            hh = self.lheight.get(x)
        for y in reversed(path):
            hh += 1
            self.lheight[y] = hh
        return self.lheight[h]

    def is_ancestor_or_self(self, a: Hash256, d: Hash256) -> bool:
        ha, hd = self.height(a), self.height(d)
        if ha is None or hd is None or hd < ha:
            return False
        x = d
        for _ in range(hd - ha):
            x = self.lparent[x]
        return x == a

    def record(self, h: Hash256, body: TransactionBlock, keys: Optional[list[Hash256]] = None) -> None:
        """Index a block's spends (accepted inputs) and inclusions."""
        if h in self.bodies:
            return
        self.bodies[h] = body
        for idx, (tx, label) in enumerate(zip(body.txs, body.labels)):
            key = keys[idx] if keys is not None else hash_of(tx)
            self.included.setdefault(key, []).append(h)
            if label is Vote.ACCEPT and tx.kind in (TxKind.DOMESTIC, TxKind.CROSS_INPUT):
                for inp in tx.inputs:
                    if inp.shard == self.shard:
                        self.spends.setdefault(inp.ref, []).append((h, tx, label))

    def spender_on_chain(self, ref: OutPoint, tip: Hash256):
        for rec in self.spends.get(ref, ()):
            if self.is_ancestor_or_self(rec[0], tip):
                return rec
        return None

    def included_on_chain(self, key: Hash256, tip: Hash256) -> bool:
        return any(self.is_ancestor_or_self(b, tip) for b in self.included.get(key, ()))

    def view_at(self, tip: Hash256) -> "ChainUtxoView":
        return ChainUtxoView(self, tip)


@dataclass
class ChainUtxoView:
    """UTXO lookups as seen from one block's ancestry."""

    ledger: ShardLedger
    tip: Hash256

    def get(self, ref: OutPoint) -> Optional[Utxo]:
        u = self.ledger.genesis.get(ref)
        if u is None or u.shard != self.ledger.shard:
            return None
        return None if self.ledger.spender_on_chain(ref, self.tip) else u

    def spent_record(self, ref: OutPoint) -> Optional[SpendRecord]:
        rec = self.ledger.spender_on_chain(ref, self.tip)
        if rec is None:
            return None
        h, tx, label = rec
        return SpendRecord(tx, label, h, self.ledger.bodies[h])


def header_lineage_ancestor(headers: Mapping[Hash256, ConsensusBlock], shard: int,
                            anc: Hash256, desc: Hash256, limit: int = 1_000_000) -> bool:
    """Ancestry by first-listed parent using headers only (for fraud proofs)."""
    x = desc
    for _ in range(limit):
        if x == anc:
            return True
        hdr = headers.get(x)
        if hdr is None:
            return False
        ps = hdr.parents_for(shard)
        if not ps:
            return False
        x = ps[0]
    return False
