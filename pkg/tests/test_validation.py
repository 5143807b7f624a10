import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifoldchain.core_model import (
    DEFAULT_SCHEME, ConsensusBlock, OutPoint, Transaction, TransactionBlock, TxInput,
    TxOutput, Utxo, Vote, address_of, body_roots, build_merkle, sha256, sign_transaction,
)
from manifoldchain.pow_engine import block_hash
from manifoldchain.validation import (
    AvailabilitySession, ChunkWithProof, Fault, FraudItem, FraudProof, IncorrectCoding,
    NotEnoughChunks, UnknownBlockHeader, UtxoSet, Verdict, answer_samples,
    chunk_leaf, encode_body, encode_bytes, make_fraud_proof, reconstruct, sample_budget,
    validate_tx, verify_fraud_proof, verify_incorrect_coding, withholding_miss_probability,
)

_wallet = itertools.count()


class World:
    """One shard with funded wallets."""

    def __init__(self, n=4, amount=100):
        self.keys = {}
        self.utxos = UtxoSet(0)
        self.coins = []
        for _ in range(n):
            sk, pk = DEFAULT_SCHEME.keygen(f"w{next(_wallet)}".encode())
            addr = address_of(pk)
            self.keys[addr] = (sk, pk)
            u = Utxo(sha256(b"genesis" + addr), 0, amount, addr, 0)
            self.utxos.mint(u)
            self.coins.append(u)

    def spend(self, coins, outs, sign=True):
        ins = tuple(TxInput(u.outpoint, u.owner_addr, u.amount, 0) for u in coins)
        tx = Transaction(ins, tuple(TxOutput(a, sha256(bytes([i]))[:20], 0) for i, a in enumerate(outs)))
        return sign_transaction(tx, self.keys) if sign else tx


def header_for(body):
    tx_root, tmy_root = body_roots(body)
    g = sha256(b"g")
    return ConsensusBlock(0, g, (g,), ((0, g),), 0, 1, tx_root, tmy_root, encode_body(body).commitment_root)


def test_validate_tx_cases():
    w = World()
    good = w.spend([w.coins[0]], [60, 40])
    assert validate_tx(good, w.utxos).ok
    dup = w.spend([w.coins[1], w.coins[1]], [200])
    assert validate_tx(dup, w.utxos).reason is Fault.DOUBLE_SPEND
    over = w.spend([w.coins[2]], [101])
    assert validate_tx(over, w.utxos).reason is Fault.IMBALANCE
    unsigned = w.spend([w.coins[3]], [100], sign=False)
    assert validate_tx(unsigned, w.utxos).reason is Fault.BAD_SIGNATURE
    assert validate_tx(good, w.utxos, {w.coins[0].outpoint}).reason is Fault.DOUBLE_SPEND
    ghost = Utxo(sha256(b"ghost"), 0, 100, w.coins[0].owner_addr, 0)
    ins = (TxInput(ghost.outpoint, ghost.owner_addr, 100, 0),)
    missing = sign_transaction(Transaction(ins, (TxOutput(100, bytes(20), 0),)), w.keys)
    assert validate_tx(missing, w.utxos).reason is Fault.MISSING_INPUT


def test_fraud_proof_bad_signature():
    w = World()
    bad = w.spend([w.coins[0]], [100], sign=False)
    body = TransactionBlock((w.spend([w.coins[1]], [100]), bad), (Vote.ACCEPT, Vote.ACCEPT))
    hdr = header_for(body)
    h = block_hash(hdr)
    proof = make_fraud_proof(body, h, w.utxos)
    assert proof is not None and proof.fault_type is Fault.BAD_FORMAT and proof.item1 is None
    assert verify_fraud_proof(proof, {h: hdr})


def test_fraud_proof_intra_block_double_spend():
    w = World()
    a = w.spend([w.coins[0]], [100])
    b = w.spend([w.coins[0]], [50, 50])
    body = TransactionBlock((a, b), (Vote.ACCEPT, Vote.ACCEPT))
    hdr = header_for(body)
    h = block_hash(hdr)
    proof = make_fraud_proof(body, h, w.utxos)
    assert proof.fault_type is Fault.DOUBLE_SPEND and proof.item1 is not None
    assert verify_fraud_proof(proof, {h: hdr})
    # tampered path
    p0 = proof.item0.tx_merkle_proof
    forged = FraudProof(FraudItem(proof.item0.tx, Vote.ACCEPT, h,
                                  type(p0)(p0.leaf_index, ((sha256(b"x"), p0.path[0][1]),))),
                        proof.item1, proof.fault_type)
    assert not verify_fraud_proof(forged, {h: hdr})
    with pytest.raises(UnknownBlockHeader):
        verify_fraud_proof(proof, {})


def test_double_spend_proof_needs_shared_input():
    w = World()
    a, b = w.spend([w.coins[0]], [100]), w.spend([w.coins[1]], [100])
    body = TransactionBlock((a, b), (Vote.ACCEPT, Vote.ACCEPT))
    hdr = header_for(body)
    h = block_hash(hdr)
    assert make_fraud_proof(body, h, w.utxos) is None
    from manifoldchain.core_model import merkle_prove, tx_leaves
    ls = tx_leaves(body)
    fake = FraudProof(FraudItem(a, Vote.ACCEPT, h, merkle_prove(ls, 0)),
                      FraudItem(b, Vote.ACCEPT, h, merkle_prove(ls, 1)), Fault.DOUBLE_SPEND)
    assert not verify_fraud_proof(fake, {h: hdr})


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 99), min_size=1, max_size=5))
def test_no_proof_verifies_against_valid_block(splits):
    """Soundness: every proof we can assemble against a valid block is refused."""
    w = World(len(splits))
    txs = tuple(w.spend([c], [s, 100 - s]) for c, s in zip(w.coins, splits))
    body = TransactionBlock(txs, (Vote.ACCEPT,) * len(txs))
    hdr = header_for(body)
    h = block_hash(hdr)
    assert make_fraud_proof(body, h, w.utxos) is None
    from manifoldchain.core_model import merkle_prove, tx_leaves
    ls = tx_leaves(body)
    items = [FraudItem(tx, Vote.ACCEPT, h, merkle_prove(ls, i)) for i, tx in enumerate(txs)]
    for a in items:
        assert not verify_fraud_proof(FraudProof(a, None, Fault.BAD_FORMAT), {h: hdr})
        for b in items:
            assert not verify_fraud_proof(FraudProof(a, b, Fault.DOUBLE_SPEND), {h: hdr})


def test_utxo_conservation_on_apply():
    w = World()
    before = w.utxos.total_value()
    txs = (w.spend([w.coins[0]], [30, 70]), w.spend([w.coins[1], w.coins[2]], [200]))
    w.utxos.apply_block(TransactionBlock(txs, (Vote.ACCEPT, Vote.ACCEPT)), sha256(b"b"))
    assert w.utxos.total_value() == before == w.utxos.minted


# -- erasure coding ------------------------------------------------------------

def _body(n=5):
    w = World(n)
    txs = tuple(w.spend([c], [100]) for c in w.coins)
    return TransactionBlock(txs, (Vote.ACCEPT,) * n, filler=3)


def test_reconstruct_from_data_chunks():
    body = _body()
    coded = encode_body(body, 8)
    chunks = coded.all_with_proofs()
    assert reconstruct(chunks[:8], 8, coded.commitment_root) == body


def test_reconstruct_random_subsets():
    body = _body()
    coded = encode_body(body, 8)
    chunks = coded.all_with_proofs()
    rng = np.random.default_rng(1)
    for _ in range(100):
        pick = rng.choice(16, size=8, replace=False)
        assert reconstruct([chunks[i] for i in pick], 8, coded.commitment_root) == body
    with pytest.raises(NotEnoughChunks):
        reconstruct(chunks[:7], 8, coded.commitment_root)


@given(st.binary(min_size=0, max_size=600), st.sampled_from([1, 2, 4, 8, 16]), st.data())
def test_any_k_subset_decodes_bytes(payload, k, data):
    coded = encode_bytes(payload, k)
    chunks = coded.all_with_proofs()
    idx = data.draw(st.lists(st.integers(0, 2 * k - 1), min_size=k, max_size=k, unique=True))
    from manifoldchain.validation import _decode_payload
    got = _decode_payload({i: chunks[i].chunk for i in idx}, k, coded.commitment_root, [])
    assert got == payload


def test_mangled_parity_detected():
    body = _body()
    coded = encode_body(body, 4)
    parity = list(coded.parity_chunks)
    bad = bytearray(parity[1])
    bad[0] ^= 0xFF
    parity[1] = bytes(bad)
    chunks = list(coded.data_chunks) + parity
    root = build_merkle([chunk_leaf(i, c) for i, c in enumerate(chunks)])
    from manifoldchain.core_model import merkle_prove
    leaves = [chunk_leaf(i, c) for i, c in enumerate(chunks)]
    proven = [ChunkWithProof(i, c, merkle_prove(leaves, i)) for i, c in enumerate(chunks)]
    with pytest.raises(IncorrectCoding) as exc:
        reconstruct(proven, 4, root)
    assert verify_incorrect_coding(exc.value.proof)
    honest = coded.all_with_proofs()
    from manifoldchain.validation import IncorrectCodingProof
    assert not verify_incorrect_coding(IncorrectCodingProof(coded.commitment_root, 4, tuple(honest)))


# -- sampling sessions ---------------------------------------------------------

def test_sampling_budget():
    assert sample_budget(128) == math.ceil(2 * 8)
    assert sample_budget(1) == 2


def _session(coded, now=0.0, delta=1.0, seed=0):
    return AvailabilitySession.open(sha256(b"blk"), coded.commitment_root, coded.k, now, delta,
                                    np.random.default_rng(seed))


def test_session_available_before_deadline():
    coded = encode_body(_body(), 16)
    s = _session(coded)
    resp = answer_samples(s.request(), coded)
    assert s.on_response(resp, 0.5) is Verdict.AVAILABLE
    assert s.on_deadline(2.0) is Verdict.AVAILABLE


def test_session_withheld_chunk_times_out_at_two_delta():
    coded = encode_body(_body(), 16)
    s = _session(coded, now=3.0, delta=0.7)
    assert s.deadline == pytest.approx(3.0 + 1.4)
    resp = answer_samples(s.request(), coded, withhold=[s.indices[0]])
    assert s.on_response(resp, 3.1) is None
    assert s.on_deadline(s.deadline) is Verdict.UNAVAILABLE


def test_session_fraud_proof_rejects():
    coded = encode_body(_body(), 16)
    s = _session(coded)
    assert s.on_fraud_proof() is Verdict.UNAVAILABLE


def test_withholding_detection_probability():
    """Hiding more than k of 2k chunks is caught with probability >= 1 - 2^-s."""
    for k in (4, 16, 64, 128):
        s = sample_budget(k)
        miss = withholding_miss_probability(k, k - 1)
        assert miss <= 2.0 ** -s
        rng = np.random.default_rng(k)
        trials, caught = 4000, 0
        hidden = set(range(k + 1))
        for _ in range(trials):
            idx = rng.choice(2 * k, size=min(s, 2 * k), replace=False)
            caught += any(int(i) in hidden for i in idx)
        assert caught / trials >= 1 - 2.0 ** -s - 3 * math.sqrt(0.25 / trials)
