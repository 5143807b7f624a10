import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifoldchain.atomicity_harness import HarnessConfig, run_schedule, run_suite
from manifoldchain.core_model import (
    DEFAULT_SCHEME, ZERO_HASH, ConsensusBlock, OutPoint, Testimony, Transaction, TransactionBlock,
    TxInput, TxKind, TxOutput, Vote, address_of, body_roots, hash_of, sha256, sign_transaction,
)
from manifoldchain.cross_shard import (
    CrossTxState, Decision, LegState, NotCross, PreconditionNotConfirmed, RejectReason,
    StaticContext, TestimonyVerdict, TxNotInBlock, combine, cross_id_of, decide_output_tx,
    find_in_body, make_refund, make_rejection_proof, make_testimony, parent_of, split_cross_tx,
    verify_refund, verify_testimony,
)

_tag = itertools.count()


class Wallets:
    def __init__(self):
        self.keys = {}

    def addr(self):
        sk, pk = DEFAULT_SCHEME.keygen(f"cs{next(_tag)}".encode())
        a = address_of(pk)
        self.keys[a] = (sk, pk)
        return a

    def coin(self, amount, shard):
        return TxInput(OutPoint(sha256(f"c{next(_tag)}".encode()), 0), self.addr(), amount, shard)

    def cross(self, ins, outs):
        """ins = [(amount, shard)], outs = [(amount, shard)]."""
        tx = Transaction(tuple(self.coin(a, s) for a, s in ins),
                         tuple(TxOutput(a, self.addr(), s) for a, s in outs), TxKind.CROSS)
        return sign_transaction(tx, self.keys)


class Chains:
    """Blocks per shard with explicit confirmation lists."""

    def __init__(self):
        self.headers, self.confirmed, self.heights, self.bodies = {}, {}, {}, {}

    def block(self, shard, txs, labels, confirm=True, height=None):
        body = TransactionBlock(tuple(txs), tuple(labels))
        tx_root, tmy_root = body_roots(body)
        hdr = ConsensusBlock(shard, ZERO_HASH, (ZERO_HASH,), ((shard, ZERO_HASH),), 0,
                             next(_tag), tx_root, tmy_root, ZERO_HASH)
        h = hash_of(hdr)
        self.headers[h], self.bodies[h] = hdr, body
        chain = self.confirmed.setdefault(shard, [])
        self.heights[h] = len(chain) if height is None else height
        if confirm:
            chain.append(h)
        return h

    def ctx(self):
        return StaticContext(self.headers, self.confirmed, self.heights)


def test_split_two_inputs_one_output():
    w = Wallets()
    tx = w.cross([(30, 0), (20, 0)], [(50, 1)])
    ins, outs = split_cross_tx(tx)
    assert set(ins) == {0} and set(outs) == {1}
    assert len(ins[0].inputs) == 2 and ins[0].outputs == ()
    assert ins[0].kind is TxKind.CROSS_INPUT and outs[1].kind is TxKind.CROSS_OUTPUT
    assert ins[0].cross_id == outs[1].cross_id == cross_id_of(tx)
    assert parent_of(outs[1]).outputs == tx.outputs


def test_split_many_to_many_and_domestic():
    w = Wallets()
    tx = w.cross([(10, 0), (5, 1)], [(7, 2), (8, 3)])
    ins, outs = split_cross_tx(tx)
    assert set(ins) == {0, 1} and set(outs) == {2, 3}
    assert sum(o.amount for leg in outs.values() for o in leg.outputs) == 15
    with pytest.raises(NotCross):
        split_cross_tx(w.cross([(10, 2)], [(10, 2)]))


def _packaged(w, chains, vote=Vote.ACCEPT, confirm=True):
    tx = w.cross([(40, 0), (60, 1)], [(100, 2)])
    ins, outs = split_cross_tx(tx)
    blocks = {s: chains.block(s, [leg], [vote if s == 1 else Vote.ACCEPT], confirm)
              for s, leg in ins.items()}
    parts = [make_testimony(leg, blocks[s], chains.bodies[blocks[s]]) for s, leg in ins.items()]
    return tx, ins, outs, blocks, parts


def test_testimony_accept_and_reject():
    w, chains = Wallets(), Chains()
    tx, _, outs, _, parts = _packaged(w, chains)
    t = combine(parts)
    assert verify_testimony(t, tx, chains.ctx()) is TestimonyVerdict.ACCEPT
    assert decide_output_tx(outs[2], t, chains.ctx()) is Decision.ACCEPT
    tx2, _, outs2, _, parts2 = _packaged(w, chains, vote=Vote.REJECT)
    assert verify_testimony(combine(parts2), tx2, chains.ctx()) is TestimonyVerdict.REJECT
    assert decide_output_tx(outs2[2], combine(parts2), chains.ctx()) is Decision.REJECT


def test_partial_or_unconfirmed_testimony_defers():
    w, chains = Wallets(), Chains()
    tx, _, outs, _, parts = _packaged(w, chains, confirm=False)
    t = combine(parts)
    assert verify_testimony(t, tx, chains.ctx()) is TestimonyVerdict.NOT_YET_CONFIRMED
    assert verify_testimony(t, tx, chains.ctx(), check_confirmation=False) is TestimonyVerdict.ACCEPT
    assert decide_output_tx(outs[2], None, chains.ctx()) is Decision.DEFER
    chains2 = Chains()
    tx, _, outs, _, parts = _packaged(w, chains2)
    assert decide_output_tx(outs[2], parts[0], chains2.ctx()) is Decision.DEFER


def test_tampered_testimony_is_invalid():
    w, chains = Wallets(), Chains()
    tx, _, outs, _, parts = _packaged(w, chains, vote=Vote.REJECT)
    t = combine(parts)
    flipped = Testimony(t.cross_id, tuple(
        type(u)(u.input_hash, u.originate_block_hash, u.tx_merkle_proof, Vote.ACCEPT) for u in t.units))
    assert verify_testimony(flipped, tx, chains.ctx()) is TestimonyVerdict.INVALID_PROOF
    assert decide_output_tx(outs[2], flipped, chains.ctx()) is Decision.REJECT
    # a unit whose block lives in the wrong shard
    u = t.units[0]
    other = chains.block(3, [tx], [Vote.ACCEPT])
    moved = Testimony(t.cross_id, (type(u)(u.input_hash, other, u.tx_merkle_proof, u.vote),) + t.units[1:])
    assert verify_testimony(moved, tx, chains.ctx()) is TestimonyVerdict.INVALID_PROOF


def test_find_in_body_missing():
    w = Wallets()
    tx = w.cross([(1, 0)], [(1, 1)])
    with pytest.raises(TxNotInBlock):
        find_in_body(tx, TransactionBlock())
    with pytest.raises(ValueError):
        combine([])


def _rejected_outputs(chains, outs):
    out_blocks = {s: chains.block(s, [leg], [Vote.REJECT]) for s, leg in outs.items()}
    return out_blocks


def test_refund_amounts_and_reject_vote_shard():
    w, chains = Wallets(), Chains()
    tx, ins, outs, blocks, parts = _packaged(w, chains, vote=Vote.REJECT)
    out_blocks = _rejected_outputs(chains, outs)
    tes_i = parts[1].units[0]                      # shard 1 voted Reject
    proofs = [make_rejection_proof(outs[s], h, chains.bodies[h], tes_i, RejectReason.REJECT_VOTE)
              for s, h in out_blocks.items()]
    refunds, proofs = make_refund(tx, {0: Vote.ACCEPT, 1: Vote.REJECT}, {2: True}, proofs)
    assert set(refunds) == {0}
    assert sum(o.amount for o in refunds[0].outputs) == 40
    assert verify_refund(refunds[0], proofs, chains.ctx(), Vote.ACCEPT) is Decision.ACCEPT
    assert verify_refund(refunds[0], proofs, chains.ctx(), None) is Decision.DEFER
    assert verify_refund(refunds[0], (), chains.ctx(), Vote.ACCEPT) is Decision.DEFER
    greedy = Transaction((), (TxOutput(41, refunds[0].outputs[0].receiver_addr, 0),),
                         TxKind.REFUND, refunds[0].cross_id, refunds[0].memo)
    assert verify_refund(greedy, proofs, chains.ctx(), Vote.ACCEPT) is Decision.REJECT


def test_refund_everything_when_outputs_reject():
    w, chains = Wallets(), Chains()
    tx, ins, outs, blocks, parts = _packaged(w, chains)
    out_blocks = _rejected_outputs(chains, outs)
    tes_i = parts[0].units[0]
    proofs = [make_rejection_proof(outs[s], h, chains.bodies[h], tes_i, RejectReason.INVALID_TESTIMONY)
              for s, h in out_blocks.items()]
    refunds, _ = make_refund(tx, {0: Vote.ACCEPT, 1: Vote.ACCEPT}, {2: True}, proofs)
    spent = sum(i.amount for i in tx.inputs)
    assert sum(o.amount for r in refunds.values() for o in r.outputs) == spent
    # a valid Accept unit cannot back an invalid-testimony claim
    assert verify_refund(refunds[0], proofs, chains.ctx(), Vote.ACCEPT) is Decision.REJECT


def test_refund_preconditions():
    w = Wallets()
    tx = w.cross([(5, 0), (5, 1)], [(10, 2)])
    with pytest.raises(PreconditionNotConfirmed):
        make_refund(tx, {0: Vote.ACCEPT, 1: None}, {2: True}, ())
    with pytest.raises(PreconditionNotConfirmed):
        make_refund(tx, {0: Vote.ACCEPT, 1: Vote.ACCEPT}, {2: False}, ())


def test_deconfirmed_sibling_proof():
    w, chains = Wallets(), Chains()
    tx = w.cross([(9, 0)], [(9, 1)])
    ins, outs = split_cross_tx(tx)
    lost = chains.block(0, [ins[0]], [Vote.ACCEPT], confirm=False, height=0)
    winner = chains.block(0, [], [], height=0)
    tes_i = make_testimony(ins[0], lost, chains.bodies[lost]).units[0]
    ob = chains.block(1, [outs[1]], [Vote.REJECT])
    proof = make_rejection_proof(outs[1], ob, chains.bodies[ob], tes_i, RejectReason.DECONFIRMED, winner)
    refunds, proofs = make_refund(tx, {0: Vote.ACCEPT}, {1: True}, [proof])
    assert verify_refund(refunds[0], proofs, chains.ctx(), Vote.ACCEPT) is Decision.ACCEPT
    wrong = make_rejection_proof(outs[1], ob, chains.bodies[ob], tes_i, RejectReason.DECONFIRMED, lost)
    assert verify_refund(refunds[0], [wrong], chains.ctx(), Vote.ACCEPT) is Decision.REJECT


def test_leg_state_is_absorbing():
    s = LegState()
    s.label(Vote.ACCEPT)
    s.label(Vote.REJECT)
    assert s.confirmed_vote is None
    s.confirm(Vote.REJECT)
    s.label(Vote.ACCEPT)
    assert s.confirmed_vote is Vote.REJECT
    with pytest.raises(AssertionError):
        s.confirm(Vote.ACCEPT)


def test_cross_state_check():
    w = Wallets()
    st_ = CrossTxState.for_tx(w.cross([(5, 0), (5, 1)], [(10, 2)]))
    st_.outputs[2].confirm(Vote.ACCEPT)
    st_.inputs[0].confirm(Vote.ACCEPT)
    with pytest.raises(AssertionError):
        st_.check()
    st_.inputs[1].confirm(Vote.ACCEPT)
    st_.check()
    assert st_.inputs_all_confirmed()


# -- randomised schedules --------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 4), st.integers(2, 4), st.integers(0, 4))
def test_schedules_keep_atomicity(seed, m, kappa, delta):
    rep = run_schedule(seed, HarnessConfig(m=m, kappa=kappa, delta=delta))
    assert rep.violations == 0


def test_schedule_is_deterministic():
    assert run_schedule(17) == run_schedule(17)


def test_unconfirmed_testimony_mutation_is_caught():
    cfg = HarnessConfig(check_confirmation=False, p_fork=0.6, p_conflict=0.6, p_drop=0.0)
    reps = run_suite(300, cfg)
    assert sum(r.violations for r in reps) >= 1
