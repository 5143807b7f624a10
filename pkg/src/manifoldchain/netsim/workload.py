"""Open-loop user transactions spending genesis outputs.

Every generated transaction spends outputs that exist from genesis, so
honest traffic never conflicts.  The genesis table is filled lazily as the
generator draws from it, which is indistinguishable from minting all
outputs up front: entries are created before any transaction spending them
is sent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core_model import (HashStubScheme, OutPoint, Transaction, TxInput, TxKind,
                          TxOutput, Utxo, address_of, hash_of, sha256,
                          sign_transaction)
from ..cross_shard import cross_id_of, split_cross_tx
from .config import Workload

USERS_PER_SHARD = 4


@dataclass
class UserTx:
    key: bytes                   # identity used for latency bookkeeping
    created: float
    tx: Transaction
    cross: bool
    in_shards: tuple[int, ...]
    out_shards: tuple[int, ...]


@dataclass
class Genesis:
    """Genesis outputs per shard, shared read-only by every node."""

    m: int
    outputs: dict[OutPoint, Utxo] = field(default_factory=dict)
    counters: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.counters = [0] * self.m

    def draw(self, shard: int, owner: bytes, amount: int) -> Utxo:
        i = self.counters[shard]
        self.counters[shard] += 1
        u = Utxo(sha256(b"genesis" + shard.to_bytes(4, "big") + i.to_bytes(8, "big")),
                 0, amount, owner, shard)
        self.outputs[u.outpoint] = u
        return u


class TxGenerator:
    def __init__(self, m: int, wl: Workload, rng: np.random.Generator, scheme=None):
        self.m = m
        self.wl = wl
        self.rng = rng
        self.scheme = scheme or HashStubScheme()
        self.genesis = Genesis(m)
        self.keys: dict[bytes, tuple[bytes, bytes]] = {}
        self.users = [[self._user(s, u) for u in range(USERS_PER_SHARD)] for s in range(m)]
        self.count = 0

    def _user(self, shard: int, u: int) -> bytes:
        secret, public = self.scheme.keygen(f"user/{shard}/{u}".encode())
        addr = address_of(public)
        self.keys[addr] = (secret, public)
        return addr

    @property
    def total_rate(self) -> float:
        return self.wl.tx_rate * self.m

    def next_gap(self) -> float:
        r = self.total_rate
        return float(self.rng.exponential(1.0 / r)) if r > 0 else float("inf")

    def _pick_user(self, shard: int) -> bytes:
        return self.users[shard][int(self.rng.integers(USERS_PER_SHARD))]

    def make(self, now: float) -> UserTx:
        self.count += 1
        amount = self.wl.amount
        cross = self.m >= 2 and self.rng.random() < self.wl.cross_ratio
        if not cross:
            s = int(self.rng.integers(self.m))
            payer = self._pick_user(s)
            u = self.genesis.draw(s, payer, amount)
            tx = Transaction((TxInput(u.outpoint, payer, amount, s),),
                             (TxOutput(amount, self._pick_user(s), s),), TxKind.DOMESTIC)
            tx = sign_transaction(tx, self.keys, self.scheme)
            return UserTx(hash_of(tx), now, tx, False, (s,), (s,))
        k = min(4, self.m)
        shards = [int(x) for x in self.rng.choice(self.m, size=k, replace=False)]
        n_in = k // 2
        ins, outs = sorted(shards[:n_in]), sorted(shards[n_in:])
        inputs = []
        for s in ins:
            payer = self._pick_user(s)
            u = self.genesis.draw(s, payer, amount)
            inputs.append(TxInput(u.outpoint, payer, amount, s))
        total = amount * len(ins)
        each, rem = divmod(total, len(outs))
        outputs = tuple(TxOutput(each + (rem if j == 0 else 0), self._pick_user(s), s)
                        for j, s in enumerate(outs))
        tx = sign_transaction(Transaction(tuple(inputs), outputs, TxKind.CROSS,
                                          memo=self.count.to_bytes(8, "big")),
                              self.keys, self.scheme)
        split_cross_tx(tx)   # warm the split cache while the object is hot
        return UserTx(cross_id_of(tx), now, tx, True, tuple(ins), tuple(outs))
