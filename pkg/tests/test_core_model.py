import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifoldchain.core_model import (
    ConsensusBlock, EmptyLeaves, Hash256, HashStubScheme, IndexOutOfRange, MerkleProof, OutPoint,
    Side, Testimony, TestimonyUnit, Transaction, TransactionBlock, TxInput, TxKind, TxOutput,
    Utxo, Vote, address_of, body_roots, build_merkle, canonical_decode, canonical_encode,
    hash_of, header_size_without_parents, merkle_prove, merkle_prove_all, merkle_verify,
    sha256, sign_transaction, unlock_ok,
)


def ref_root(leaves):
    """Independent recursive merkle root with last-node duplication."""
    if len(leaves) == 1:
        return bytes(leaves[0])
    if len(leaves) % 2:
        leaves = list(leaves) + [leaves[-1]]
    return ref_root([hashlib.sha256(bytes(a) + bytes(b)).digest()
                     for a, b in zip(leaves[::2], leaves[1::2])])


def leaves_of(n, salt=b""):
    return [sha256(salt + i.to_bytes(4, "big")) for i in range(n)]


# -- strategies ---------------------------------------------------------------

hashes = st.binary(min_size=32, max_size=32).map(Hash256)
addrs = st.binary(min_size=20, max_size=20)
amounts = st.integers(0, 2**64 - 1)
shards = st.integers(0, 63)
outpoints = st.builds(OutPoint, hashes, st.integers(0, 2**32))
tx_inputs = st.builds(TxInput, outpoints, addrs, amounts, shards, st.binary(max_size=96))
tx_outputs = st.builds(TxOutput, amounts, addrs, shards)
transactions = st.builds(Transaction, st.lists(tx_inputs, max_size=4).map(tuple),
                         st.lists(tx_outputs, max_size=4).map(tuple),
                         st.sampled_from(list(TxKind)), st.none() | hashes, st.binary(max_size=8))
proofs = st.builds(MerkleProof, st.integers(0, 1000),
                   st.lists(st.tuples(hashes, st.sampled_from(list(Side))), max_size=6).map(tuple))
units = st.builds(TestimonyUnit, hashes, hashes, proofs, st.sampled_from(list(Vote)))
testimonies = st.builds(Testimony, hashes, st.lists(units, max_size=3).map(tuple))
headers = st.builds(
    ConsensusBlock, shards, hashes, st.lists(hashes, max_size=3).map(tuple),
    st.lists(st.tuples(shards, hashes), max_size=5).map(tuple), st.integers(0, 2**62),
    st.integers(0, 2**64 - 1), hashes, hashes, hashes)
bodies = st.builds(TransactionBlock, st.lists(transactions, max_size=3).map(tuple),
                   st.lists(st.sampled_from(list(Vote)), max_size=3).map(tuple),
                   st.lists(testimonies, max_size=2).map(tuple), st.integers(0, 4096))
values = st.one_of(transactions, headers, bodies, testimonies,
                   st.builds(Utxo, hashes, st.integers(0, 2**32), amounts, addrs, shards))


# -- encoding and hashing -------------------------------------------------------

@settings(max_examples=300)
@given(values)
def test_encoding_round_trip(v):
    assert canonical_decode(canonical_encode(v)) == v


@given(values, values)
def test_encoding_injective(a, b):
    if a != b:
        assert canonical_encode(a) != canonical_encode(b)


def test_encoding_is_deterministic_across_copies():
    tx = Transaction((), (TxOutput(5, b"\x01" * 20, 2),))
    twin = Transaction((), (TxOutput(5, b"\x01" * 20, 2),))
    assert canonical_encode(tx) == canonical_encode(twin)
    assert hash_of(tx) == hash_of(twin)


def test_zero_utxo_layout_is_pinned():
    u = Utxo(Hash256(bytes(32)), 0, 0, bytes(20), 0)
    enc = canonical_encode(u)
    assert len(enc) == 87
    assert hash_of(u) == sha256(enc)


def test_sha256_vectors():
    assert hash_of(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert hash_of(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_hash256_orders_as_integer():
    a, b = Hash256.from_int(5), Hash256.from_int(2**200)
    assert a < b and a.as_int() == 5 and len(a) == 32


# -- merkle -------------------------------------------------------------------

def test_single_leaf_is_root():
    h = sha256(b"x")
    assert build_merkle([h]) == h


def test_two_leaves():
    a, b = leaves_of(2)
    assert build_merkle([a, b]) == sha256(a + b)


def test_empty_leaves_rejected():
    with pytest.raises(EmptyLeaves):
        build_merkle([])


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7, 8, 13])
def test_root_matches_reference(n):
    ls = leaves_of(n, b"ref")
    assert bytes(build_merkle(ls)) == ref_root(ls)


def test_prove_verify_pair():
    a, b = leaves_of(2)
    assert merkle_verify(build_merkle([a, b]), a, merkle_prove([a, b], 0))


def test_flipped_leaf_bit_fails():
    ls = leaves_of(5)
    root, proof = build_merkle(ls), merkle_prove(ls, 3)
    bad = bytearray(ls[3])
    bad[0] ^= 1
    assert not merkle_verify(root, Hash256(bytes(bad)), proof)


def test_exhaustive_eight_leaf_tree():
    ls = leaves_of(8)
    root = build_merkle(ls)
    ps = [merkle_prove(ls, i) for i in range(8)]
    for i in range(8):
        for j in range(8):
            assert merkle_verify(root, ls[i], ps[j]) == (i == j)


def test_prove_all_matches_single_proofs():
    ls = leaves_of(11)
    assert merkle_prove_all(ls) == [merkle_prove(ls, i) for i in range(11)]


def test_prove_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        merkle_prove(leaves_of(3), 3)


@given(st.integers(1, 40), st.data())
def test_merkle_tamper_property(n, data):
    ls = leaves_of(n, b"p")
    i = data.draw(st.integers(0, n - 1))
    root, proof = build_merkle(ls), merkle_prove(ls, i)
    assert merkle_verify(root, ls[i], proof)
    if proof.path:
        k = data.draw(st.integers(0, len(proof.path) - 1))
        sib, side = proof.path[k]
        path = list(proof.path)
        path[k] = (sha256(sib), side)
        assert not merkle_verify(root, ls[i], MerkleProof(i, tuple(path)))
        assert not merkle_verify(root, ls[i], MerkleProof(i ^ 1 if n > 1 else i + 1, proof.path))


# -- blocks ---------------------------------------------------------------------

def _header(parents=1, shards=1):
    g = tuple((s, sha256(bytes((s, p)))) for s in range(shards) for p in range(parents))
    own = tuple(h for s, h in g if s == 0)
    return ConsensusBlock(0, own[0], own, g, 0, 0, sha256(b"t"), sha256(b"m"), sha256(b"a"))


def test_header_size_constant_and_small():
    sizes = {header_size_without_parents(_header(p, s)) for p in (1, 3) for s in (1, 8)}
    assert len(sizes) == 1 and sizes.pop() <= 256


def test_header_invariants():
    h = _header(2, 3)
    h.check_invariants()
    bad = ConsensusBlock(0, sha256(b"z"), h.inter_parents, h.global_parents, 0, 0,
                         h.tx_merkle_root, h.tmy_merkle_root, h.availability_commitment)
    with pytest.raises(ValueError):
        bad.check_invariants()


def test_body_roots_commit_labels():
    tx = Transaction((), (TxOutput(1, bytes(20), 0),))
    a = TransactionBlock((tx,), (Vote.ACCEPT,))
    b = TransactionBlock((tx,), (Vote.REJECT,))
    assert body_roots(a)[0] != body_roots(b)[0]


def test_transaction_invariants():
    i = TxInput(OutPoint(sha256(b"u"), 0), bytes(20), 10, 0)
    ok = Transaction((i,), (TxOutput(10, bytes(20), 0),))
    ok.check_invariants()
    with pytest.raises(ValueError):
        Transaction((i,), (TxOutput(11, bytes(20), 0),)).check_invariants()
    with pytest.raises(ValueError):
        Transaction((i,), (TxOutput(10, bytes(20), 1),)).check_invariants()
    with pytest.raises(ValueError):
        Transaction((i,), (), TxKind.CROSS_INPUT).check_invariants()


def test_signatures_round_trip_and_tamper():
    scheme = HashStubScheme()
    sk, pk = scheme.keygen(b"alice")
    addr = address_of(pk)
    tx = Transaction((TxInput(OutPoint(sha256(b"u"), 0), addr, 10, 0),),
                     (TxOutput(10, bytes(20), 0),))
    signed = sign_transaction(tx, {addr: (sk, pk)}, scheme)
    assert unlock_ok(signed, signed.inputs[0], scheme)
    forged = Transaction(signed.inputs, (TxOutput(10, b"\x02" * 20, 0),))
    assert not unlock_ok(forged, forged.inputs[0], scheme)
