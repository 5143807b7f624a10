"""Per-shard block DAGs with the longest-verified-chain rule.

Each node keeps one :class:`ShardView` per shard.  A block is stored in
every view it extends: its own shard's view for exclusive blocks, all
views with listed parents for inclusive ones.  Verification status
(Unverified, Verified, Invalid) is a property of the block and is shared by
all views; pruning is decided per view.

Within a view every live block records the listed parents that were live
when it attached.  Two heights are kept:

* ``height``: 1 + max height over live parents (structural),
* ``vheight``: 1 + max vheight over live parents that are themselves
  chain-verified, defined only when the block is Verified and has such a
  parent (genesis has vheight 0).

The verified tip is the chain-verified block of maximal vheight, ties by
lowest hash (or first seen, in the ablation mode).  Following "chain
parents" (the chain-verified parent one vheight below, lowest hash first)
from the tip back to genesis gives the longest verified chain.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

from .core_model import (ConsensusBlock, Hash256, TransactionBlock, ZERO_HASH,
                         body_roots)
from .pow_engine import Difficulty, block_hash
from .validation import Verdict


class Status(Enum):
    UNVERIFIED = 0
    VERIFIED = 1
    INVALID = 2
    PRUNED = 3


class OrphanNoKnownParent(LookupError):
    """No listed parent is known yet; the block is buffered for retry."""


class BodyRootMismatch(ValueError):
    pass


class MissingBodyForOwnShard(ValueError):
    pass


class UnknownBlock(KeyError):
    pass


ORPHAN_CAP = 10_000


def genesis_header(shard: int) -> ConsensusBlock:
    return ConsensusBlock(shard, ZERO_HASH, (), (), 0, 0, ZERO_HASH, ZERO_HASH, ZERO_HASH)


def genesis_hash(shard: int) -> Hash256:
    return block_hash(genesis_header(shard))


@dataclass(eq=False)
class BlockEntry:
    header: ConsensusBlock
    body: Optional[TransactionBlock]
    status: Status
    height: int
    received_at: float
    seq: int
    parents: set[Hash256] = field(default_factory=set)
    children: set[Hash256] = field(default_factory=set)
    vheight: int = -1

    @property
    def live(self) -> bool:
        return self.status is not Status.PRUNED and self.status is not Status.INVALID

    @property
    def chain_verified(self) -> bool:
        return self.vheight >= 0


@dataclass(eq=False)
class ShardView:
    shard: int
    kappa: int
    first_seen_ties: bool = False
    blocks: dict[Hash256, BlockEntry] = field(default_factory=dict)
    by_vheight: dict[int, set[Hash256]] = field(default_factory=dict)
    nonchain: set[Hash256] = field(default_factory=set)   # live, not chain-verified
    max_vheight: int = 0
    genesis: Hash256 = ZERO_HASH

    @classmethod
    def create(cls, shard: int, kappa: int, first_seen_ties: bool = False) -> "ShardView":
        v = cls(shard, kappa, first_seen_ties)
        g = genesis_hash(shard)
        v.genesis = g
        v.blocks[g] = BlockEntry(genesis_header(shard), TransactionBlock(), Status.VERIFIED,
                                 0, 0.0, -1, vheight=0)
        v.by_vheight[0] = {g}
        return v

    # -- queries ------------------------------------------------------------

    def _best(self, hashes: Iterable[Hash256]) -> Hash256:
        if self.first_seen_ties:
            return min(hashes, key=lambda h: (self.blocks[h].seq, h))
        return min(hashes)

    @property
    def tip_verified(self) -> Hash256:
        return self._best(self.by_vheight[self.max_vheight])

    @property
    def tip_vheight(self) -> int:
        return self.max_vheight

    def entry(self, h: Hash256) -> BlockEntry:
        try:
            return self.blocks[h]
        except KeyError:
            raise UnknownBlock(h) from None

    def is_live(self, h: Hash256) -> bool:
        e = self.blocks.get(h)
        return e is not None and e.live

    def unverified_frontier(self) -> set[Hash256]:
        """Heads of not-yet-verified forks at least as long as the verified chain."""
        floor = self.max_vheight
        return {h for h in self.nonchain
                if not self.blocks[h].children and self.blocks[h].height >= floor}

    def chain_parent(self, h: Hash256) -> Optional[Hash256]:
        e = self.blocks[h]
        if e.vheight <= 0:
            return None
        want = e.vheight - 1
        cands = [p for p in e.parents if self.blocks[p].vheight == want]
        # lowest hash, not first-seen, so a tip determines its chain at every node
        return min(cands) if cands else None

    def verified_chain(self) -> list[Hash256]:
        """Longest verified chain, genesis first."""
        out = []
        h: Optional[Hash256] = self.tip_verified
        while h is not None:
            out.append(h)
            h = self.chain_parent(h)
        out.reverse()
        return out

    def confirmed_prefix(self) -> list[Hash256]:
        chain = self.verified_chain()
        return chain[:max(0, len(chain) - self.kappa)]

    def is_ancestor(self, anc: Hash256, desc: Hash256) -> bool:
        """True iff ``anc`` is reachable from ``desc`` through live parent links."""
        if anc not in self.blocks or desc not in self.blocks:
            return False
        floor = self.blocks[anc].height
        seen = {desc}
        stack = [desc]
        while stack:
            x = stack.pop()
            if x == anc:
                return True
            for p in self.blocks[x].parents:
                if p not in seen and self.blocks[p].height >= floor:
                    seen.add(p)
                    stack.append(p)
        return False

    def live_hashes(self) -> list[Hash256]:
        return [h for h, e in self.blocks.items() if e.live]

    def dump_lines(self) -> list[str]:
        rows = []
        for h, e in sorted(self.blocks.items(), key=lambda kv: (kv[1].height, kv[0])):
            rows.append(json.dumps({
                "shard": self.shard, "height": e.height, "hash": h.hex(),
                "status": e.status.name, "parents": sorted(p.hex() for p in e.parents)}))
        return rows


@dataclass
class InsertResult:
    block_hash: Hash256
    heights: dict[int, int] = field(default_factory=dict)   # view -> height
    waiting_views: tuple[int, ...] = ()
    dropped_views: tuple[int, ...] = ()
    duplicate: bool = False
    pruned: set[Hash256] = field(default_factory=set)


BodyValidator = Callable[["Multichain", Hash256, ConsensusBlock, TransactionBlock], bool]


@dataclass(eq=False)
class Multichain:
    """All shard views held by one node.

    Fork choice is the longest verified chain with tip ties broken by
    lowest hash, or by first arrival when ``first_seen_ties`` is set.
    Losing siblings stay stored, so the chain is a function of the block
    set alone and honest views converge once they hold the same blocks.
    ``sibling_rule`` additionally prunes every verified sibling but the
    lowest hash as soon as it verifies; that pruning is irreversible and
    arrival-order dependent, so nodes leave it off.
    """

    m: int
    own_shard: int
    kappa: int
    difficulties: Optional[Sequence[Difficulty]] = None
    sibling_rule: bool = False
    first_seen_ties: bool = False
    body_validator: Optional[BodyValidator] = None
    views: list[ShardView] = field(default_factory=list)
    headers: dict[Hash256, ConsensusBlock] = field(default_factory=dict)
    status: dict[Hash256, Status] = field(default_factory=dict)
    inclusive: dict[Hash256, bool] = field(default_factory=dict)
    flags: dict[Hash256, set[Verdict]] = field(default_factory=dict)
    _waiting: dict[tuple[int, Hash256], list[Hash256]] = field(default_factory=dict)
    _waiting_order: deque = field(default_factory=deque)
    _seq: int = 0
    _pruned_log: set = field(default_factory=set)

    def __post_init__(self):
        if not 0 <= self.own_shard < self.m:
            raise ValueError("own_shard out of range")
        if not self.views:
            self.views = [ShardView.create(s, self.kappa, self.first_seen_ties)
                          for s in range(self.m)]
        for v in self.views:
            self.headers[v.genesis] = v.blocks[v.genesis].header
            self.status[v.genesis] = Status.VERIFIED

    # -- mining -------------------------------------------------------------

    def inter_parents(self, shard: int) -> tuple[Hash256, ...]:
        v = self.views[shard]
        tip = v.tip_verified
        return (tip,) + tuple(sorted(v.unverified_frontier() - {tip}))

    def parent_sets(self) -> tuple[Hash256, tuple[Hash256, ...], tuple[tuple[int, Hash256], ...]]:
        own = self.inter_parents(self.own_shard)
        glob = tuple((s, h) for s in range(self.m)
                     for h in (own if s == self.own_shard else self.inter_parents(s)))
        return own[0], own, glob

    # -- insertion ----------------------------------------------------------

    def _is_inclusive(self, header: ConsensusBlock, h: Hash256) -> bool:
        if self.difficulties is not None:
            return h.as_int() < self.difficulties[header.shard_index].sigma_prime
        return len({s for s, _ in header.global_parents}) > 1

    def _target_views(self, header: ConsensusBlock, inclusive: bool) -> list[int]:
        if inclusive:
            return sorted({s for s, _ in header.global_parents if 0 <= s < self.m})
        return [header.shard_index]

    def insert_block(self, header: ConsensusBlock, body: Optional[TransactionBlock] = None,
                     now: float = 0.0, inclusive: Optional[bool] = None,
                     block_id: Optional[Hash256] = None,
                     pending_body_ok: bool = False) -> InsertResult:
        """Store a PoW-checked header (and body for own-shard blocks).

        Own-shard blocks need a body unless ``pending_body_ok``; they are then
        validated at once and become Verified or Invalid.  Foreign blocks stay
        Unverified until :meth:`apply_verdict` delivers both AVAILABLE and
        VALID_TXS, or a negative verdict.
        """
        h = block_id if block_id is not None else block_hash(header)
        if h in self.headers:
            return InsertResult(h, duplicate=True)
        own = header.shard_index == self.own_shard
        if own and body is None and not pending_body_ok:
            raise MissingBodyForOwnShard(h)
        if body is not None and body_roots(body) != (header.tx_merkle_root, header.tmy_merkle_root):
            raise BodyRootMismatch(h)
        incl = self._is_inclusive(header, h) if inclusive is None else inclusive
        self.headers[h] = header
        self.status[h] = Status.UNVERIFIED
        self.inclusive[h] = incl
        self.flags[h] = set()
        self._seq += 1
        res = InsertResult(h)
        waiting, dropped = [], []
        for s in self._target_views(header, incl):
            listed = header.parents_for(s)
            outcome = self._attach(s, h, listed, body if own else None, now)
            if outcome == "attached":
                res.heights[s] = self.views[s].blocks[h].height
            elif outcome == "waiting":
                waiting.append(s)
            else:
                dropped.append(s)
        res.waiting_views, res.dropped_views = tuple(waiting), tuple(dropped)
        if own and body is not None:
            res.pruned |= self.attach_body(h, body, now)
        if not res.heights and waiting and not dropped:
            raise OrphanNoKnownParent(h)
        return res

    def attach_body(self, h: Hash256, body: TransactionBlock, now: float = 0.0) -> set[Hash256]:
        """Validate an own-shard body and turn it into a verdict."""
        header = self.headers[h]
        if body_roots(body) != (header.tx_merkle_root, header.tmy_merkle_root):
            raise BodyRootMismatch(h)
        for v in self.views:
            e = v.blocks.get(h)
            if e is not None and e.body is None:
                e.body = body
        ok = self.body_validator is None or self.body_validator(self, h, header, body)
        if not ok:
            return self.apply_verdict(h, Verdict.FRAUD_PROVEN, now)
        self.apply_verdict(h, Verdict.AVAILABLE, now)
        return self.apply_verdict(h, Verdict.VALID_TXS, now)

    def _attach(self, s: int, h: Hash256, listed: Sequence[Hash256],
                body: Optional[TransactionBlock], now: float) -> str:
        v = self.views[s]
        live = [p for p in listed if v.is_live(p)]
        missing = [p for p in listed if p not in v.blocks]
        for p in missing:
            self._wait(s, p, h)
        if not live:
            if missing:
                return "waiting"
            v.blocks[h] = BlockEntry(self.headers[h], body, Status.PRUNED, 0, now, self._seq)
            return "dropped"
        e = BlockEntry(self.headers[h], body, self.status[h], 0, now, self._seq, set(live))
        v.blocks[h] = e
        for p in live:
            v.blocks[p].children.add(h)
        v.nonchain.add(h)
        self._refresh(v, [h])
        self._wake(s, h, now)
        return "attached"

    def _wait(self, s: int, parent: Hash256, child: Hash256) -> None:
        key = (s, parent)
        lst = self._waiting.get(key)
        if lst is None:
            lst = self._waiting[key] = []
            self._waiting_order.append(key)
            while len(self._waiting_order) > ORPHAN_CAP:
                self._waiting.pop(self._waiting_order.popleft(), None)
        lst.append(child)

    def _wake(self, s: int, parent: Hash256, now: float) -> None:
        kids = self._waiting.pop((s, parent), None)
        if not kids:
            return
        v = self.views[s]
        if not v.is_live(parent):
            return
        for c in kids:
            e = v.blocks.get(c)
            if e is None:
                self._attach(s, c, self.headers[c].parents_for(s), None, now)
            elif e.live and parent not in e.parents:
                e.parents.add(parent)
                v.blocks[parent].children.add(c)
                self._refresh(v, [c])

    def pending_orphans(self) -> int:
        return sum(len(x) for x in self._waiting.values())

    # -- height bookkeeping --------------------------------------------------

    def _set_vheight(self, v: ShardView, h: Hash256, e: BlockEntry, new: int) -> None:
        old = e.vheight
        if old == new:
            return
        if old >= 0:
            bucket = v.by_vheight[old]
            bucket.discard(h)
            if not bucket:
                del v.by_vheight[old]
        else:
            v.nonchain.discard(h)
        e.vheight = new
        if new >= 0:
            v.by_vheight.setdefault(new, set()).add(h)
            if new > v.max_vheight:
                v.max_vheight = new
        elif e.live:
            v.nonchain.add(h)
        while v.max_vheight > 0 and v.max_vheight not in v.by_vheight:
            v.max_vheight -= 1

    def _refresh(self, v: ShardView, seeds: Iterable[Hash256]) -> None:
        """Recompute heights downward from ``seeds`` and apply the sibling rule."""
        queue = deque(seeds)
        newly: list[Hash256] = []
        while queue:
            h = queue.popleft()
            e = v.blocks.get(h)
            if e is None or not e.live or h == v.genesis:
                continue
            ps = [v.blocks[p] for p in e.parents]
            height = 1 + max(p.height for p in ps)
            # a block joins the verified chain once every surviving parent has
            cv = [p.vheight for p in ps]
            vh = 1 + max(cv) if e.status is Status.VERIFIED and min(cv) >= 0 else -1
            if height == e.height and vh == e.vheight:
                continue
            e.height = height
            if vh != e.vheight:
                self._set_vheight(v, h, e, vh)
                if vh >= 0:
                    newly.append(h)
            queue.extend(e.children)
        if self.sibling_rule:
            for h in newly:
                self._sibling_check(v, h)

    def _sibling_check(self, v: ShardView, h: Hash256) -> None:
        e = v.blocks.get(h)
        if e is None or not e.live or e.vheight < 0:
            return
        rivals = [r for r in v.by_vheight.get(e.vheight, ()) if r != h and v.blocks[r].parents & e.parents]
        if rivals:
            best = min([h] + rivals)
            self._prune(v, [x for x in [h] + rivals if x != best])

    def prune_siblings(self, shard: int, height: int) -> Optional[Hash256]:
        """Resolve all sibling conflicts among chain-verified blocks at ``height``.

        Returns the lowest surviving hash at that level (None if empty).
        """
        v = self.views[shard]
        level = sorted(v.by_vheight.get(height, ()))
        for h in level:
            if v.is_live(h) and v.blocks[h].vheight == height:
                rivals = [r for r in v.by_vheight.get(height, ())
                          if r != h and v.blocks[r].parents & v.blocks[h].parents]
                losers = [r for r in rivals if r > h]
                if losers:
                    self._prune(v, losers)
        left = v.by_vheight.get(height)
        return min(left) if left else None

    def _prune(self, v: ShardView, roots: Iterable[Hash256]) -> set[Hash256]:
        """Prune ``roots`` and every descendant left without a live parent."""
        pruned: set[Hash256] = set()
        stack = list(roots)
        touched: set[Hash256] = set()
        while stack:
            x = stack.pop()
            e = v.blocks.get(x)
            if e is None or not e.live or x == v.genesis:
                continue
            self._set_vheight(v, x, e, -1)
            v.nonchain.discard(x)
            e.status = Status.PRUNED
            pruned.add(x)
            for p in e.parents:
                pe = v.blocks.get(p)
                if pe is not None:
                    pe.children.discard(x)
            e.parents = set()
            for c in e.children:
                ce = v.blocks[c]
                ce.parents.discard(x)
                if not ce.parents:
                    stack.append(c)
                else:
                    touched.add(c)
            e.children = set()
        while v.max_vheight > 0 and v.max_vheight not in v.by_vheight:
            v.max_vheight -= 1
        self._pruned_log |= pruned
        self._refresh(v, touched - pruned)
        return pruned

    # -- verdicts -----------------------------------------------------------

    def apply_verdict(self, h: Hash256, verdict: Verdict, now: float = 0.0) -> set[Hash256]:
        """Feed a verification outcome; returns every hash pruned as a result."""
        if h not in self.headers:
            raise UnknownBlock(h)
        st = self.status[h]
        if st is Status.INVALID:
            return set()
        if verdict in (Verdict.UNAVAILABLE, Verdict.FRAUD_PROVEN):
            self.status[h] = Status.INVALID
            out: set[Hash256] = set()
            for v in self.views:
                e = v.blocks.get(h)
                if e is None:
                    continue
                if e.live:
                    out |= self._prune(v, [h])
                e.status = Status.INVALID
            return out
        self.flags[h].add(verdict)
        if st is Status.VERIFIED or not {Verdict.AVAILABLE, Verdict.VALID_TXS} <= self.flags[h]:
            return set()
        self.status[h] = Status.VERIFIED
        self._pruned_log = set()
        for v in self.views:
            e = v.blocks.get(h)
            if e is not None and e.live:
                e.status = Status.VERIFIED
                self._refresh(v, [h])
        out, self._pruned_log = self._pruned_log, set()
        return out

    def mark_verified(self, h: Hash256, now: float = 0.0) -> set[Hash256]:
        """Shortcut for trusted acceptance (both positive verdicts at once)."""
        self.apply_verdict(h, Verdict.AVAILABLE, now)
        return self.apply_verdict(h, Verdict.VALID_TXS, now)

    # -- reads ----------------------------------------------------------------

    def confirmed_prefix(self, shard: int) -> list[Hash256]:
        return self.views[shard].confirmed_prefix()

    def tip(self, shard: int) -> Hash256:
        return self.views[shard].tip_verified

    def dump(self) -> list[str]:
        return [line for v in self.views for line in v.dump_lines()]


@dataclass
class ConfirmedTracker:
    """Incrementally follows one view's confirmed prefix and counts rollbacks.

    A violation is recorded whenever a refresh yields a prefix that is not
    an extension of the previous one.
    """

    view: ShardView
    confirmed: list[Hash256] = field(default_factory=list)
    violations: int = 0
    rolled_back: int = 0
    on_confirm: Optional[Callable[[Hash256, int], None]] = None

    def update(self) -> list[Hash256]:
        v = self.view
        target_len = max(0, v.max_vheight - v.kappa + 1)
        walked: list[Hash256] = []
        h: Optional[Hash256] = v.tip_verified
        join = -1
        while h is not None:
            vh = v.blocks[h].vheight
            if vh < len(self.confirmed) and self.confirmed[vh] == h:
                join = vh
                break
            walked.append(h)
            h = v.chain_parent(h)
        walked.reverse()
        new = (self.confirmed[:join + 1] + walked)[:target_len]
        old = self.confirmed
        common = min(join + 1, len(new))
        while common < min(len(new), len(old)) and new[common] == old[common]:
            common += 1
        if common < len(old):
            self.violations += 1
            self.rolled_back += len(old) - common
        added = new[common:]
        self.confirmed = new
        if self.on_confirm is not None:
            for i, x in enumerate(added):
                self.on_confirm(x, common + i)
        return added
