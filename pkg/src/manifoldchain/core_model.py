"""On-chain data types, canonical encoding, hashing and merkle trees.

Every value that is hashed or sent over the simulated wire goes through
:func:`canonical_encode`.  The encoding is self-describing (one tag byte per
value, length prefixes on variable data), which makes it injective and lets
:func:`canonical_decode` invert it without a schema.
"""

from __future__ import annotations

import hashlib
import struct
from functools import lru_cache
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from typing import Any, Optional, Sequence

HASH_LEN = 32
ADDR_LEN = 20


class EncodingError(ValueError):
    pass


class EmptyLeaves(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class Hash256(bytes):
    """32-byte digest ordered as a big-endian unsigned integer.

    Byte-wise comparison of equal-length big-endian strings coincides with
    integer comparison, so the inherited ``bytes`` ordering is already the
    right total order.
    """

    def __new__(cls, value: bytes | bytearray = b"\x00" * HASH_LEN):
        if len(value) != HASH_LEN:
            raise ValueError(f"Hash256 needs {HASH_LEN} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_int(cls, n: int) -> "Hash256":
        return cls(n.to_bytes(HASH_LEN, "big"))

    def as_int(self) -> int:
        return int.from_bytes(self, "big")

    def short(self) -> str:
        return self.hex()[:10]

    def __repr__(self) -> str:
        return f"Hash256({self.hex()[:16]}..)"


ZERO_HASH = Hash256()


def sha256(data: bytes) -> Hash256:
    return Hash256(hashlib.sha256(data).digest())


class Side(Enum):
    LEFT = 0   # sibling sits to the left of the running node
    RIGHT = 1


class TxKind(Enum):
    DOMESTIC = 0
    CROSS_INPUT = 1
    CROSS_OUTPUT = 2
    REFUND = 3
    CROSS = 4      # user-level transaction before it is split into legs


class Vote(Enum):
    ACCEPT = 0
    REJECT = 1


class BlockKind(Enum):
    EXCLUSIVE = 0
    INCLUSIVE = 1


@dataclass(frozen=True, slots=True)
class Pid:
    public_key: bytes
    bandwidth_mbps: float
    bandwidth_sig: bytes
    ip_tag: bytes


@dataclass(frozen=True, slots=True)
class OutPoint:
    tx_hash: Hash256
    output_index: int


@dataclass(frozen=True, slots=True)
class Utxo:
    tx_hash: Hash256
    output_index: int
    amount: int
    owner_addr: bytes
    shard: int

    @property
    def outpoint(self) -> OutPoint:
        return OutPoint(self.tx_hash, self.output_index)


@dataclass(frozen=True, slots=True)
class TxInput:
    """Spend of one UTXO.

    ``amount`` and ``shard`` restate the referenced output so that a shard
    holding only the full transaction can check balance statically.
    ``unlock_sig`` is the payer's public key followed by the signature.
    """

    ref: OutPoint
    payer_addr: bytes
    amount: int
    shard: int
    unlock_sig: bytes = b""


@dataclass(frozen=True, slots=True)
class TxOutput:
    amount: int
    receiver_addr: bytes
    shard: int


@dataclass(frozen=True, slots=True)
class Transaction:
    inputs: tuple[TxInput, ...]
    outputs: tuple[TxOutput, ...]
    kind: TxKind = TxKind.DOMESTIC
    cross_id: Optional[Hash256] = None
    memo: bytes = b""   # free-form uniqueness salt (e.g. refund nonce)

    def input_total(self) -> int:
        return sum(i.amount for i in self.inputs)

    def output_total(self) -> int:
        return sum(o.amount for o in self.outputs)

    def payer_shards(self) -> set[int]:
        return {i.shard for i in self.inputs}

    def receiver_shards(self) -> set[int]:
        return {o.shard for o in self.outputs}

    def check_invariants(self) -> None:
        if self.kind in (TxKind.DOMESTIC, TxKind.CROSS):
            if self.input_total() != self.output_total():
                raise ValueError("inputs and outputs do not balance")
            shards = self.payer_shards() | self.receiver_shards()
            if (self.kind is TxKind.DOMESTIC) != (len(shards) <= 1):
                raise ValueError("domestic iff all parties share one shard")
        if self.kind in (TxKind.CROSS_INPUT, TxKind.CROSS_OUTPUT, TxKind.REFUND):
            if self.cross_id is None:
                raise ValueError(f"{self.kind.name} requires cross_id")


@dataclass(frozen=True, slots=True)
class MerkleProof:
    leaf_index: int
    path: tuple[tuple[Hash256, Side], ...]


@dataclass(frozen=True, slots=True)
class TestimonyUnit:
    __test__ = False   # keep pytest from collecting it

    input_hash: Hash256
    originate_block_hash: Hash256
    tx_merkle_proof: MerkleProof
    vote: Vote


@dataclass(frozen=True, slots=True)
class Testimony:
    __test__ = False

    cross_id: Hash256
    units: tuple[TestimonyUnit, ...]


@dataclass(frozen=True, slots=True)
class ConsensusBlock:
    shard_index: int
    verified_parent: Hash256
    inter_parents: tuple[Hash256, ...]
    global_parents: tuple[tuple[int, Hash256], ...]
    timestamp_us: int
    nonce: int
    tx_merkle_root: Hash256
    tmy_merkle_root: Hash256
    availability_commitment: Hash256

    def parents_for(self, shard: int) -> tuple[Hash256, ...]:
        return tuple(h for s, h in self.global_parents if s == shard)

    def check_invariants(self) -> None:
        if self.verified_parent not in self.inter_parents:
            raise ValueError("verified_parent must appear in inter_parents")
        own = set(self.parents_for(self.shard_index))
        if not set(self.inter_parents) <= own:
            raise ValueError("inter_parents must be listed in global_parents")


@dataclass(frozen=True, slots=True)
class TransactionBlock:
    """Block body.

    ``labels`` holds one vote per transaction (domestic txs are always
    ACCEPT); it is committed together with the transaction in the merkle
    leaf.  ``filler`` counts synthetic transactions that are accounted for
    in size and throughput but not materialised.
    """

    txs: tuple[Transaction, ...] = ()
    labels: tuple[Vote, ...] = ()
    testimonies: tuple[Testimony, ...] = ()
    filler: int = 0

    def tx_count(self) -> int:
        return len(self.txs) + self.filler


# ---------------------------------------------------------------------------
# canonical encoding

_T_NONE, _T_INT, _T_BIGINT, _T_FLOAT, _T_BYTES, _T_HASH = 0, 1, 2, 3, 4, 5
_T_STR, _T_SEQ, _T_ENUM, _T_RECORD, _T_BOOL = 6, 7, 8, 9, 10

# Stable type ids; appending is safe, reordering breaks old encodings.
_RECORDS: list[type] = [
    Pid, OutPoint, Utxo, TxInput, TxOutput, Transaction, MerkleProof,
    TestimonyUnit, Testimony, ConsensusBlock, TransactionBlock,
]
_ENUMS: list[type] = [Side, TxKind, Vote, BlockKind]
_RECORD_ID = {cls: i for i, cls in enumerate(_RECORDS)}
_ENUM_ID = {cls: i for i, cls in enumerate(_ENUMS)}
_FIELDS = {cls: tuple(f.name for f in fields(cls)) for cls in _RECORDS}


def register_record(cls: type) -> type:
    """Make another frozen dataclass encodable (used by downstream modules)."""
    if cls not in _RECORD_ID:
        _RECORD_ID[cls] = len(_RECORDS)
        _RECORDS.append(cls)
        _FIELDS[cls] = tuple(f.name for f in fields(cls))
    return cls


def register_enum(cls: type) -> type:
    if cls not in _ENUM_ID:
        _ENUM_ID[cls] = len(_ENUMS)
        _ENUMS.append(cls)
    return cls


# Records are immutable, so their encodings are memoised by identity.  Each
# entry keeps its object alive, which makes the id key unambiguous.
_ENC_CACHE: dict[int, tuple[Any, bytes]] = {}
_ENC_CACHE_CAP = 200_000


def _put(out: bytearray, v: Any) -> None:
    t = type(v)
    if v is None:
        out.append(_T_NONE)
    elif t is bool:
        out += bytes((_T_BOOL, 1 if v else 0))
    elif t is int:
        if v < 0:
            raise EncodingError("negative integers are not part of the domain")
        if v < 1 << 64:
            out.append(_T_INT)
            out += v.to_bytes(8, "big")
        else:
            raw = v.to_bytes((v.bit_length() + 7) // 8, "big")
            out.append(_T_BIGINT)
            out += len(raw).to_bytes(4, "big") + raw
    elif t is float:
        out.append(_T_FLOAT)
        out += struct.pack(">d", v)
    elif t is Hash256:
        out.append(_T_HASH)
        out += v
    elif t is bytes or t is bytearray:
        out.append(_T_BYTES)
        out += len(v).to_bytes(4, "big") + v
    elif t is str:
        raw = v.encode()
        out.append(_T_STR)
        out += len(raw).to_bytes(4, "big") + raw
    elif t is tuple or t is list:
        out.append(_T_SEQ)
        out += len(v).to_bytes(4, "big")
        for item in v:
            _put(out, item)
    elif t in _ENUM_ID:
        out += bytes((_T_ENUM, _ENUM_ID[t], v.value))
    elif t in _RECORD_ID:
        hit = _ENC_CACHE.get(id(v))
        if hit is not None and hit[0] is v:
            out += hit[1]
            return
        start = len(out)
        out += bytes((_T_RECORD, _RECORD_ID[t]))
        for name in _FIELDS[t]:
            _put(out, getattr(v, name))
        if len(_ENC_CACHE) >= _ENC_CACHE_CAP:
            _ENC_CACHE.clear()
        _ENC_CACHE[id(v)] = (v, bytes(out[start:]))
    else:
        raise EncodingError(f"cannot encode {t.__name__}")


def canonical_encode(value: Any) -> bytes:
    """Deterministic injective byte encoding.

    Raw byte strings are their own encoding, so ``hash_of(b"abc")`` is plain
    SHA-256 of ``abc``.  Everything else is tagged.
    """
    if type(value) is bytes:
        return value
    out = bytearray()
    _put(out, value)
    return bytes(out)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise EncodingError("truncated input")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def value(self) -> Any:
        tag = self.take(1)[0]
        if tag == _T_NONE:
            return None
        if tag == _T_BOOL:
            return self.take(1)[0] == 1
        if tag == _T_INT:
            return int.from_bytes(self.take(8), "big")
        if tag == _T_BIGINT:
            return int.from_bytes(self.take(self.u32()), "big")
        if tag == _T_FLOAT:
            return struct.unpack(">d", self.take(8))[0]
        if tag == _T_HASH:
            return Hash256(self.take(HASH_LEN))
        if tag == _T_BYTES:
            return bytes(self.take(self.u32()))
        if tag == _T_STR:
            return self.take(self.u32()).decode()
        if tag == _T_SEQ:
            return tuple(self.value() for _ in range(self.u32()))
        if tag == _T_ENUM:
            cls_id, val = self.take(2)
            return _ENUMS[cls_id](val)
        if tag == _T_RECORD:
            cls = _RECORDS[self.take(1)[0]]
            return cls(*(self.value() for _ in _FIELDS[cls]))
        raise EncodingError(f"unknown tag {tag}")


def canonical_decode(data: bytes) -> Any:
    r = _Reader(data)
    v = r.value()
    if r.pos != len(data):
        raise EncodingError("trailing bytes")
    return v


def hash_of(value: Any) -> Hash256:
    """SHA-256 over the canonical encoding."""
    return sha256(canonical_encode(value))


def address_of(public_key: bytes) -> bytes:
    return hash_of(public_key)[:ADDR_LEN]


@lru_cache(maxsize=1 << 16)
def labeled_leaf(tx: Transaction, label: Vote = Vote.ACCEPT) -> Hash256:
    """Merkle leaf committing a transaction together with its packaging vote."""
    # transactions are immutable and get repackaged often, so leaves are memoised
    return sha256(canonical_encode(tx) + bytes((label.value,)))


def tx_leaves(body: TransactionBlock) -> list[Hash256]:
    return [labeled_leaf(tx, lab) for tx, lab in zip(body.txs, body.labels)]


# ---------------------------------------------------------------------------
# merkle trees

EMPTY_ROOT = sha256(b"")


def _pair(a: bytes, b: bytes) -> Hash256:
    return sha256(a + b)


def _layers(leaves: Sequence[Hash256]) -> list[list[Hash256]]:
    if not leaves:
        raise EmptyLeaves("merkle tree needs at least one leaf")
    layers = [list(leaves)]
    while len(layers[-1]) > 1:
        cur = layers[-1]
        if len(cur) % 2:
            cur = cur + [cur[-1]]
        layers.append([_pair(cur[i], cur[i + 1]) for i in range(0, len(cur), 2)])
    return layers


def build_merkle(leaves: Sequence[Hash256]) -> Hash256:
    """Binary merkle root; an odd layer duplicates its last node.

    A single leaf is its own root.
    """
    return _layers(leaves)[-1][0]


def merkle_root_or_empty(leaves: Sequence[Hash256]) -> Hash256:
    return build_merkle(leaves) if leaves else EMPTY_ROOT


def _proof_from_layers(layers: list[list[Hash256]], index: int) -> MerkleProof:
    path = []
    i = index
    for layer in layers[:-1]:
        if len(layer) % 2:
            layer = layer + [layer[-1]]
        if i % 2:
            path.append((layer[i - 1], Side.LEFT))
        else:
            path.append((layer[i + 1], Side.RIGHT))
        i //= 2
    return MerkleProof(index, tuple(path))


def merkle_prove(leaves: Sequence[Hash256], index: int) -> MerkleProof:
    if not 0 <= index < len(leaves):
        raise IndexOutOfRange(index)
    return _proof_from_layers(_layers(leaves), index)


def merkle_prove_all(leaves: Sequence[Hash256]) -> list[MerkleProof]:
    """Proofs for every leaf, building the tree once."""
    layers = _layers(leaves)
    return [_proof_from_layers(layers, i) for i in range(len(leaves))]


def merkle_verify(root: Hash256, leaf: Hash256, proof: MerkleProof) -> bool:
    """Recompute the root from ``leaf`` along ``proof``.

    The side of each step must agree with the bit of ``leaf_index`` at that
    level, which binds the proof to its position.
    """
    node = leaf
    i = proof.leaf_index
    if i < 0 or i >= 1 << len(proof.path):
        return False
    for sibling, side in proof.path:
        if (side is Side.LEFT) != bool(i & 1):
            return False
        node = _pair(sibling, node) if side is Side.LEFT else _pair(node, sibling)
        i >>= 1
    return node == root


def body_roots(body: TransactionBlock) -> tuple[Hash256, Hash256]:
    """(tx root, testimony root) for a body."""
    tx_root = merkle_root_or_empty(tx_leaves(body))
    tmy_root = merkle_root_or_empty([hash_of(t) for t in body.testimonies])
    return tx_root, tmy_root


def header_size_without_parents(block: ConsensusBlock) -> int:
    stripped = ConsensusBlock(
        block.shard_index, block.verified_parent, (), (), block.timestamp_us,
        block.nonce, block.tx_merkle_root, block.tmy_merkle_root,
        block.availability_commitment,
    )
    return len(canonical_encode(stripped))


def seconds_to_us(t: float) -> int:
    return int(round(t * 1_000_000))


def to_debug_json(value: Any) -> Any:
    """JSON-friendly rendering for inspection; never hashed."""
    if isinstance(value, Hash256):
        return value.hex()
    if isinstance(value, (bytes, bytearray)):
        return value.hex()
    if isinstance(value, Enum):
        return value.name
    if isinstance(value, (list, tuple)):
        return [to_debug_json(v) for v in value]
    if is_dataclass(value):
        return {f.name: to_debug_json(getattr(value, f.name)) for f in fields(value)}
    return value


# ---------------------------------------------------------------------------
# signatures

class SignatureScheme:
    """Minimal signing interface used by transactions and Pids."""

    pk_len: int = 32

    def keygen(self, seed: bytes) -> tuple[bytes, bytes]:  # (secret, public)
        raise NotImplementedError

    def sign(self, secret: bytes, msg: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public: bytes, msg: bytes, sig: bytes) -> bool:
        raise NotImplementedError


@dataclass
class HashStubScheme(SignatureScheme):
    """Keyed-hash signatures with a verification oracle.

    Signatures are H(secret || msg); the oracle maps each public key to its
    secret so verification can recompute the tag.  Good enough where
    signatures are treated as ideal, and much faster than real curves.
    """

    _oracle: dict[bytes, bytes] = field(default_factory=dict)

    def keygen(self, seed: bytes) -> tuple[bytes, bytes]:
        secret = sha256(b"stub-secret" + seed)
        public = bytes(sha256(b"stub-public" + secret))
        self._oracle[public] = bytes(secret)
        return bytes(secret), public

    def sign(self, secret: bytes, msg: bytes) -> bytes:
        return bytes(sha256(secret + msg))

    def verify(self, public: bytes, msg: bytes, sig: bytes) -> bool:
        secret = self._oracle.get(public)
        return secret is not None and bytes(sha256(secret + msg)) == sig


class Ed25519Scheme(SignatureScheme):
    """Real signatures via the ``cryptography`` package (optional extra)."""

    def __init__(self) -> None:
        from cryptography.hazmat.primitives.asymmetric import ed25519
        from cryptography.hazmat.primitives import serialization
        self._ed = ed25519
        self._ser = serialization

    def keygen(self, seed: bytes) -> tuple[bytes, bytes]:
        secret = bytes(sha256(b"ed25519" + seed))
        key = self._ed.Ed25519PrivateKey.from_private_bytes(secret)
        public = key.public_key().public_bytes(
            self._ser.Encoding.Raw, self._ser.PublicFormat.Raw)
        return secret, public

    def sign(self, secret: bytes, msg: bytes) -> bytes:
        return self._ed.Ed25519PrivateKey.from_private_bytes(secret).sign(msg)

    def verify(self, public: bytes, msg: bytes, sig: bytes) -> bool:
        try:
            self._ed.Ed25519PublicKey.from_public_bytes(public).verify(sig, msg)
            return True
        except Exception:
            return False


DEFAULT_SCHEME = HashStubScheme()


_SIGHASH_CACHE: dict[int, tuple[Transaction, bytes]] = {}


def sighash(tx: Transaction) -> bytes:
    """Digest signed by every payer: the transaction with signatures blanked."""
    hit = _SIGHASH_CACHE.get(id(tx))
    if hit is not None and hit[0] is tx:
        return hit[1]
    if len(_SIGHASH_CACHE) >= _ENC_CACHE_CAP:
        _SIGHASH_CACHE.clear()
    digest = _sighash(tx)
    _SIGHASH_CACHE[id(tx)] = (tx, digest)
    return digest


def _sighash(tx: Transaction) -> bytes:
    blank = tuple(TxInput(i.ref, i.payer_addr, i.amount, i.shard, b"") for i in tx.inputs)
    return bytes(hash_of(Transaction(blank, tx.outputs, tx.kind, tx.cross_id, tx.memo)))


def sign_transaction(tx: Transaction, keys: dict[bytes, tuple[bytes, bytes]],
                     scheme: SignatureScheme = DEFAULT_SCHEME) -> Transaction:
    """Fill in unlock signatures; ``keys`` maps payer address to (secret, public)."""
    msg = sighash(tx)
    signed = []
    for i in tx.inputs:
        secret, public = keys[i.payer_addr]
        signed.append(TxInput(i.ref, i.payer_addr, i.amount, i.shard,
                              public + scheme.sign(secret, msg)))
    return Transaction(tuple(signed), tx.outputs, tx.kind, tx.cross_id, tx.memo)


def unlock_ok(tx: Transaction, inp: TxInput,
              scheme: SignatureScheme = DEFAULT_SCHEME, msg: bytes | None = None) -> bool:
    """Stateless signature check of one input."""
    public, sig = inp.unlock_sig[:scheme.pk_len], inp.unlock_sig[scheme.pk_len:]
    if len(public) != scheme.pk_len or address_of(public) != inp.payer_addr:
        return False
    return scheme.verify(public, msg if msg is not None else sighash(tx), sig)
