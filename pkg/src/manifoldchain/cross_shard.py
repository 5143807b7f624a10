"""Asynchronous atomic commitment for cross-shard transactions.

A user-level transaction spanning several shards is split into one input
leg per payer shard and one output leg per receiver shard.  Input shards
package their leg with an Accept/Reject label; miners then send
testimonies (merkle proofs of the labelled leg) to the output shards.  An
output leg is accepted once every input has a confirmed Accept unit, and
rejected as soon as the confirmed evidence shows a Reject or a broken
proof.  Rejected outputs let accepted inputs be refunded against a
proof-of-rejection.

The cross id is the hash of the transaction with signatures blanked, which
is also the message every payer signs.  Output legs and refunds carry the
encoded parent transaction in ``memo`` so that any shard can recompute the
legs a testimony must refer to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from enum import Enum
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from .core_model import (ConsensusBlock, Hash256, Testimony, TestimonyUnit,
                         Transaction, TransactionBlock, TxKind, TxOutput, Vote,
                         canonical_decode, canonical_encode, hash_of,
                         labeled_leaf, merkle_prove, merkle_verify,
                         register_enum, register_record, sighash, tx_leaves)


class NotCross(ValueError):
    pass


class TxNotInBlock(KeyError):
    pass


class PreconditionNotConfirmed(RuntimeError):
    pass


class TestimonyVerdict(Enum):
    __test__ = False
    ACCEPT = 0
    REJECT = 1
    NOT_YET_CONFIRMED = 2
    INVALID_PROOF = 3


class Decision(Enum):
    ACCEPT = 0
    REJECT = 1
    DEFER = 2


class RejectReason(Enum):
    REJECT_VOTE = 0
    DECONFIRMED = 1
    INVALID_TESTIMONY = 2


register_enum(RejectReason)


def cross_id_of(tx: Transaction) -> Hash256:
    return Hash256(sighash(tx))


_PARENT_CACHE: dict[bytes, object] = {}


def parent_of(leg: Transaction) -> Transaction:
    """The user-level transaction an output leg or refund was cut from."""
    tx = _PARENT_CACHE.get(leg.memo)
    if tx is None:
        tx = canonical_decode(leg.memo)
        if len(_PARENT_CACHE) > 100_000:
            _PARENT_CACHE.clear()
        _PARENT_CACHE[leg.memo] = tx
    if not isinstance(tx, Transaction) or tx.kind is not TxKind.CROSS:
        raise ValueError("leg does not carry its parent transaction")
    return tx


_SPLIT_CACHE: dict[int, tuple[Transaction, tuple]] = {}


def split_cross_tx(tx: Transaction) -> tuple[dict[int, Transaction], dict[int, Transaction]]:
    """Input legs by payer shard and output legs by receiver shard."""
    hit = _SPLIT_CACHE.get(id(tx))
    if hit is None or hit[0] is not tx:
        if len(_SPLIT_CACHE) > 100_000:
            _SPLIT_CACHE.clear()
        hit = (tx, _split(tx))
        _SPLIT_CACHE[id(tx)] = hit
    ins, outs = hit[1]
    return dict(ins), dict(outs)


def _split(tx: Transaction) -> tuple[dict[int, Transaction], dict[int, Transaction]]:
    shards = tx.payer_shards() | tx.receiver_shards()
    if len(shards) <= 1:
        raise NotCross("all parties share one shard")
    cid = cross_id_of(tx)
    parent = Transaction(tx.inputs, tx.outputs, TxKind.CROSS, tx.cross_id, tx.memo)
    memo = canonical_encode(parent)
    ins = {s: Transaction(tuple(i for i in tx.inputs if i.shard == s), (),
                          TxKind.CROSS_INPUT, cid)
           for s in sorted(tx.payer_shards())}
    outs = {s: Transaction((), tuple(o for o in tx.outputs if o.shard == s),
                           TxKind.CROSS_OUTPUT, cid, memo)
            for s in sorted(tx.receiver_shards())}
    return ins, outs


def input_hashes(tx: Transaction) -> list[Hash256]:
    return [hash_of(i) for i in tx.inputs]


def find_in_body(tx: Transaction, body: TransactionBlock) -> tuple[int, Vote]:
    for idx, t in enumerate(body.txs):
        if t == tx:
            return idx, body.labels[idx]
    raise TxNotInBlock(hash_of(tx))


def make_testimony(input_leg: Transaction, block_hash: Hash256,
                   body: TransactionBlock) -> Testimony:
    """Partial testimony: one unit per input of the leg, vote = packaged label."""
    idx, label = find_in_body(input_leg, body)
    proof = merkle_prove(tx_leaves(body), idx)
    return Testimony(input_leg.cross_id, tuple(
        TestimonyUnit(hash_of(i), block_hash, proof, label) for i in input_leg.inputs))


def combine(testimonies: Iterable[Testimony]) -> Testimony:
    """Merge partial testimonies for one cross id (duplicates dropped)."""
    units: dict[tuple[Hash256, Hash256], TestimonyUnit] = {}
    cid = None
    for t in testimonies:
        if cid is None:
            cid = t.cross_id
        elif t.cross_id != cid:
            raise ValueError("testimonies for different cross ids")
        for u in t.units:
            units.setdefault((u.input_hash, u.originate_block_hash), u)
    if cid is None:
        raise ValueError("nothing to combine")
    return Testimony(cid, tuple(units.values()))


class ChainContext(Protocol):
    """What a shard knows about other shards' chains."""

    def header(self, h: Hash256) -> Optional[ConsensusBlock]: ...
    def is_confirmed(self, h: Hash256) -> bool: ...
    def deconfirmed_by(self, h: Hash256) -> Optional[Hash256]: ...


@dataclass
class StaticContext:
    """ChainContext over explicit header and confirmed-prefix tables."""

    headers: Mapping[Hash256, ConsensusBlock]
    confirmed: Mapping[int, Sequence[Hash256]]
    heights: Mapping[Hash256, int] = field(default_factory=dict)

    def header(self, h: Hash256) -> Optional[ConsensusBlock]:
        return self.headers.get(h)

    def is_confirmed(self, h: Hash256) -> bool:
        hdr = self.headers.get(h)
        return hdr is not None and h in set(self.confirmed.get(hdr.shard_index, ()))

    def deconfirmed_by(self, h: Hash256) -> Optional[Hash256]:
        hdr = self.headers.get(h)
        if hdr is None or h not in self.heights:
            return None
        chain = self.confirmed.get(hdr.shard_index, ())
        k = self.heights[h]
        if k < len(chain) and chain[k] != h:
            return chain[k]
        return None


def unit_proves(unit: TestimonyUnit, leg: Transaction, ctx: ChainContext) -> Optional[bool]:
    """True/False for a checked proof, None when the originate header is unknown."""
    hdr = ctx.header(unit.originate_block_hash)
    if hdr is None:
        return None
    if leg.inputs and hdr.shard_index != leg.inputs[0].shard:
        return False
    return _proof_ok(hdr.tx_merkle_root, leg, unit.vote, unit.tx_merkle_proof)


@lru_cache(maxsize=1 << 16)
def _proof_ok(root: Hash256, leg: Transaction, vote, proof) -> bool:
    # pure in its arguments; many nodes check the same unit
    return merkle_verify(root, labeled_leaf(leg, vote), proof)


def _leg_by_input(cross_tx: Transaction) -> dict[Hash256, Transaction]:
    ins, _ = split_cross_tx(cross_tx)
    return {hash_of(i): leg for leg in ins.values() for i in leg.inputs}


def verify_testimony(testimony: Testimony, cross_tx: Transaction, ctx: ChainContext,
                     check_confirmation: bool = True) -> TestimonyVerdict:
    """Judge a (possibly multi-fork) testimony for ``cross_tx``.

    Checks run in this order: any broken proof gives INVALID_PROOF; an input
    without a unit from a confirmed originate block gives NOT_YET_CONFIRMED;
    then REJECT if a chosen unit votes Reject, else ACCEPT.  A unit whose
    header is still unknown counts as not yet confirmed.  With
    ``check_confirmation`` off (a deliberate mutation used to test the test
    suite) the latest unit per input is trusted as is.
    """
    legs = _leg_by_input(cross_tx)
    if testimony.cross_id != cross_id_of(cross_tx):
        return TestimonyVerdict.INVALID_PROOF
    chosen: dict[Hash256, TestimonyUnit] = {}
    for u in testimony.units:
        leg = legs.get(u.input_hash)
        if leg is None:
            return TestimonyVerdict.INVALID_PROOF
        ok = unit_proves(u, leg, ctx)
        if ok is False:
            return TestimonyVerdict.INVALID_PROOF
        if ok is None:
            continue
        if not check_confirmation:
            chosen[u.input_hash] = u
        elif ctx.is_confirmed(u.originate_block_hash):
            chosen[u.input_hash] = u
    if any(h not in chosen for h in legs):
        return TestimonyVerdict.NOT_YET_CONFIRMED
    if any(u.vote is Vote.REJECT for u in chosen.values()):
        return TestimonyVerdict.REJECT
    return TestimonyVerdict.ACCEPT


def decide_output_tx(output_tx: Transaction, testimony: Optional[Testimony], ctx: ChainContext,
                     check_confirmation: bool = True) -> Decision:
    if output_tx.kind is not TxKind.CROSS_OUTPUT:
        raise ValueError("not an output leg")
    if testimony is None:
        return Decision.DEFER
    verdict = verify_testimony(testimony, parent_of(output_tx), ctx, check_confirmation)
    if verdict is TestimonyVerdict.ACCEPT:
        return Decision.ACCEPT
    if verdict is TestimonyVerdict.NOT_YET_CONFIRMED:
        return Decision.DEFER
    return Decision.REJECT


@dataclass(frozen=True, slots=True)
class ProofOfRejection:
    """Evidence that one output shard rejected a cross transaction.

    ``tes_o`` proves the output leg sits with a Reject label in a block of
    the output shard.  ``tes_i`` is the input-side evidence: a unit voting
    Reject, a unit in a block that lost its height to ``sibling``, or the
    unit that failed verification.
    """

    cross_id: Hash256
    output_shard: int
    tes_o: TestimonyUnit
    tes_i: TestimonyUnit
    reason: RejectReason
    sibling: Optional[Hash256] = None


register_record(ProofOfRejection)


def make_rejection_proof(output_leg: Transaction, out_block_hash: Hash256,
                         out_body: TransactionBlock, tes_i: TestimonyUnit,
                         reason: RejectReason, sibling: Optional[Hash256] = None) -> ProofOfRejection:
    idx, label = find_in_body(output_leg, out_body)
    if label is not Vote.REJECT:
        raise ValueError("output leg was not rejected")
    unit = TestimonyUnit(hash_of(output_leg), out_block_hash,
                         merkle_prove(tx_leaves(out_body), idx), Vote.REJECT)
    return ProofOfRejection(output_leg.cross_id, output_leg.outputs[0].shard, unit, tes_i,
                            reason, sibling)


def refund_outputs(input_leg: Transaction) -> tuple[TxOutput, ...]:
    return tuple(TxOutput(i.amount, i.payer_addr, i.shard) for i in input_leg.inputs)


def make_refund(cross_tx: Transaction, confirmed_input_votes: Mapping[int, Optional[Vote]],
                output_rejected: Mapping[int, bool],
                proofs: Sequence[ProofOfRejection]) -> tuple[dict[int, Transaction], tuple[ProofOfRejection, ...]]:
    """Refund legs for every input shard whose leg was confirmed as accepted.

    Requires every input leg and every output leg to be confirmed, with all
    outputs rejected.
    """
    ins, outs = split_cross_tx(cross_tx)
    if any(confirmed_input_votes.get(s) is None for s in ins):
        raise PreconditionNotConfirmed("input legs not all confirmed")
    if not all(output_rejected.get(s, False) for s in outs):
        raise PreconditionNotConfirmed("output legs not all confirmed as rejected")
    memo = canonical_encode(parent_of(next(iter(outs.values()))))
    refunds = {s: Transaction((), refund_outputs(leg), TxKind.REFUND, leg.cross_id, memo)
               for s, leg in ins.items() if confirmed_input_votes[s] is Vote.ACCEPT}
    return refunds, tuple(proofs)


def _check_rejection(proof: ProofOfRejection, cross_tx: Transaction,
                     ctx: ChainContext) -> Decision:
    _, outs = split_cross_tx(cross_tx)
    out_leg = outs.get(proof.output_shard)
    if out_leg is None or proof.cross_id != cross_id_of(cross_tx):
        return Decision.REJECT
    if proof.tes_o.input_hash != hash_of(out_leg) or proof.tes_o.vote is not Vote.REJECT:
        return Decision.REJECT
    hdr = ctx.header(proof.tes_o.originate_block_hash)
    if hdr is None:
        return Decision.DEFER
    if hdr.shard_index != proof.output_shard or not merkle_verify(
            hdr.tx_merkle_root, labeled_leaf(out_leg, Vote.REJECT), proof.tes_o.tx_merkle_proof):
        return Decision.REJECT
    if not ctx.is_confirmed(proof.tes_o.originate_block_hash):
        return Decision.DEFER
    legs = _leg_by_input(cross_tx)
    leg = legs.get(proof.tes_i.input_hash)
    if leg is None:
        return Decision.REJECT
    ok = unit_proves(proof.tes_i, leg, ctx)
    if proof.reason is RejectReason.INVALID_TESTIMONY:
        # the output shard's confirmed Reject label is the authority here
        return Decision.ACCEPT if ok is not True else Decision.REJECT
    if ok is None:
        return Decision.DEFER
    if not ok:
        return Decision.REJECT
    if proof.reason is RejectReason.REJECT_VOTE:
        if proof.tes_i.vote is not Vote.REJECT:
            return Decision.REJECT
        return Decision.ACCEPT if ctx.is_confirmed(proof.tes_i.originate_block_hash) else Decision.DEFER
    winner = ctx.deconfirmed_by(proof.tes_i.originate_block_hash)
    if winner is None:
        return Decision.DEFER
    return Decision.ACCEPT if winner == proof.sibling else Decision.REJECT


def verify_refund(refund_tx: Transaction, proofs: Sequence[ProofOfRejection], ctx: ChainContext,
                  own_leg_vote: Optional[Vote] = None) -> Decision:
    """Input-shard check of a refund leg.

    ``own_leg_vote`` is this shard's confirmed label of its input leg
    (None while unconfirmed).  Every output shard must have proven its
    rejection, and the refund must return exactly the leg's inputs.
    """
    if refund_tx.kind is not TxKind.REFUND or refund_tx.inputs:
        return Decision.REJECT
    try:
        cross_tx = parent_of(refund_tx)
    except Exception:
        return Decision.REJECT
    ins, outs = split_cross_tx(cross_tx)
    shards = {o.shard for o in refund_tx.outputs}
    if len(shards) != 1 or refund_tx.cross_id != cross_id_of(cross_tx):
        return Decision.REJECT
    shard = shards.pop()
    leg = ins.get(shard)
    if leg is None or refund_tx.outputs != refund_outputs(leg):
        return Decision.REJECT
    if own_leg_vote is None:
        return Decision.DEFER
    if own_leg_vote is not Vote.ACCEPT:
        return Decision.REJECT
    by_shard = {p.output_shard: p for p in proofs}
    if any(s not in by_shard for s in outs):
        return Decision.DEFER
    verdicts = [_check_rejection(by_shard[s], cross_tx, ctx) for s in outs]
    if Decision.REJECT in verdicts:
        return Decision.REJECT
    if Decision.DEFER in verdicts:
        return Decision.DEFER
    return Decision.ACCEPT


class Phase(Enum):
    UNSEEN = 0
    LABELED = 1
    CONFIRMED = 2


@dataclass
class LegState:
    phase: Phase = Phase.UNSEEN
    vote: Optional[Vote] = None

    def label(self, vote: Vote) -> None:
        if self.phase is not Phase.CONFIRMED:
            self.phase, self.vote = Phase.LABELED, vote

    def confirm(self, vote: Vote) -> None:
        if self.phase is Phase.CONFIRMED and self.vote is not vote:
            raise AssertionError("confirmed label changed")
        self.phase, self.vote = Phase.CONFIRMED, vote

    @property
    def confirmed_vote(self) -> Optional[Vote]:
        return self.vote if self.phase is Phase.CONFIRMED else None


@dataclass
class CrossTxState:
    cross_id: Hash256
    inputs: dict[int, LegState] = field(default_factory=dict)
    outputs: dict[int, LegState] = field(default_factory=dict)
    refunds: dict[int, LegState] = field(default_factory=dict)

    @classmethod
    def for_tx(cls, tx: Transaction) -> "CrossTxState":
        ins, outs = split_cross_tx(tx)
        return cls(cross_id_of(tx), {s: LegState() for s in ins}, {s: LegState() for s in outs})

    def inputs_all_confirmed(self) -> bool:
        return all(x.phase is Phase.CONFIRMED for x in self.inputs.values())

    def check(self) -> None:
        """Output Confirmed(Accept) implies all inputs Confirmed(Accept)."""
        if any(o.confirmed_vote is Vote.ACCEPT for o in self.outputs.values()):
            if not all(i.confirmed_vote is Vote.ACCEPT for i in self.inputs.values()):
                raise AssertionError("output accepted without all inputs accepted")
