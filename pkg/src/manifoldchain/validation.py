"""Transaction validity, fraud proofs and coded data-availability sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .core_model import (DEFAULT_SCHEME, ConsensusBlock, Hash256, MerkleProof,
                         OutPoint, SignatureScheme, Transaction, TransactionBlock,
                         TxKind, Utxo, Vote, body_roots, build_merkle,
                         canonical_decode, canonical_encode, labeled_leaf,
                         merkle_prove, merkle_prove_all, merkle_verify, register_enum,
                         register_record, sha256, sighash, tx_leaves, unlock_ok)


class Verdict(Enum):
    AVAILABLE = 0
    UNAVAILABLE = 1
    VALID_TXS = 2
    FRAUD_PROVEN = 3


class Fault(Enum):
    DOUBLE_SPEND = 0
    BAD_FORMAT = 1
    MISSING_INPUT = 2
    WRONG_OWNER = 3
    AMOUNT_MISMATCH = 4
    IMBALANCE = 5
    BAD_SIGNATURE = 6
    MISLABELED = 7


register_enum(Fault)


@dataclass(frozen=True)
class TxVerdict:
    ok: bool
    reason: Optional[Fault] = None

    def __bool__(self) -> bool:
        return self.ok


VALID = TxVerdict(True)


# ---------------------------------------------------------------------------
# UTXO state

@dataclass(frozen=True)
class SpendRecord:
    tx: Transaction
    label: Vote
    block_hash: Hash256
    body: TransactionBlock


class UtxoView(Protocol):
    def get(self, ref: OutPoint) -> Optional[Utxo]: ...
    def spent_record(self, ref: OutPoint) -> Optional[SpendRecord]: ...


@dataclass
class UtxoSet:
    """Live outputs of one shard plus a record of who spent what."""

    shard: int = 0
    live: dict[OutPoint, Utxo] = field(default_factory=dict)
    spent: dict[OutPoint, SpendRecord] = field(default_factory=dict)
    minted: int = 0

    def mint(self, utxo: Utxo) -> None:
        ref = utxo.outpoint
        if ref in self.live or ref in self.spent:
            raise ValueError("duplicate outpoint")
        self.live[ref] = utxo
        self.minted += utxo.amount

    def get(self, ref: OutPoint) -> Optional[Utxo]:
        return self.live.get(ref)

    def spent_record(self, ref: OutPoint) -> Optional[SpendRecord]:
        return self.spent.get(ref)

    def total_value(self) -> int:
        return sum(u.amount for u in self.live.values())

    def spend_inputs(self, tx: Transaction, label: Vote, block_hash: Hash256,
                     body: TransactionBlock) -> None:
        for inp in tx.inputs:
            if inp.shard != self.shard:
                continue
            if self.live.pop(inp.ref, None) is None:
                raise ValueError(f"spend of non-live output {inp.ref}")
            self.spent[inp.ref] = SpendRecord(tx, label, block_hash, body)

    def create_outputs(self, tx: Transaction) -> list[Utxo]:
        made = []
        tx_hash = sha256(canonical_encode(tx))
        for idx, out in enumerate(tx.outputs):
            if out.shard != self.shard:
                continue
            u = Utxo(tx_hash, idx, out.amount, out.receiver_addr, self.shard)
            if u.outpoint in self.live or u.outpoint in self.spent:
                raise ValueError("output created twice")
            self.live[u.outpoint] = u
            made.append(u)
        return made

    def apply_block(self, body: TransactionBlock, block_hash: Hash256) -> None:
        """Apply a block's domestic txs and accepted input legs.

        Cross output legs and refunds materialise later, once their
        cross-shard outcome is decided, through :meth:`create_outputs`.
        """
        for tx, label in zip(body.txs, body.labels):
            if tx.kind is TxKind.DOMESTIC:
                self.spend_inputs(tx, label, block_hash, body)
                self.create_outputs(tx)
            elif tx.kind is TxKind.CROSS_INPUT and label is Vote.ACCEPT:
                self.spend_inputs(tx, label, block_hash, body)


def stateless_fault(tx: Transaction, scheme: SignatureScheme = DEFAULT_SCHEME) -> Optional[Fault]:
    """Faults visible from the transaction alone."""
    if tx.kind in (TxKind.DOMESTIC, TxKind.CROSS_INPUT, TxKind.CROSS):
        if not tx.inputs:
            return Fault.BAD_FORMAT
        refs = [i.ref for i in tx.inputs]
        if len(set(refs)) != len(refs):
            return Fault.DOUBLE_SPEND
        if tx.kind is not TxKind.CROSS_INPUT and tx.input_total() != tx.output_total():
            return Fault.IMBALANCE
        if tx.kind is TxKind.DOMESTIC and len(tx.payer_shards() | tx.receiver_shards()) > 1:
            return Fault.BAD_FORMAT
        if tx.kind is TxKind.CROSS_INPUT:
            # legs carry the parent transaction's signatures, made over its id
            if tx.cross_id is None or tx.outputs or len(tx.payer_shards()) != 1:
                return Fault.BAD_FORMAT
            msg = bytes(tx.cross_id)
        else:
            msg = sighash(tx)
        if not all(unlock_ok(tx, i, scheme, msg) for i in tx.inputs):
            return Fault.BAD_SIGNATURE
    elif tx.kind in (TxKind.CROSS_OUTPUT, TxKind.REFUND):
        if tx.inputs or not tx.outputs or tx.cross_id is None:
            return Fault.BAD_FORMAT
    return None


def validate_tx(tx: Transaction, utxos: UtxoView, pending_view: Optional[set[OutPoint]] = None,
                scheme: SignatureScheme = DEFAULT_SCHEME) -> TxVerdict:
    """Bitcoin-style checks against a UTXO view.

    ``pending_view`` holds outpoints consumed by earlier transactions of the
    same block or mempool snapshot.  Cross output legs and refunds pass
    structural checks only; their outcome is decided by the cross-shard
    protocol.
    """
    fault = stateless_fault(tx, scheme)
    if fault is not None:
        return TxVerdict(False, fault)
    if tx.kind in (TxKind.CROSS_OUTPUT, TxKind.REFUND):
        return VALID
    pending = pending_view or set()
    for inp in tx.inputs:
        if inp.ref in pending:
            return TxVerdict(False, Fault.DOUBLE_SPEND)
        u = utxos.get(inp.ref)
        if u is None:
            if utxos.spent_record(inp.ref) is not None:
                return TxVerdict(False, Fault.DOUBLE_SPEND)
            return TxVerdict(False, Fault.MISSING_INPUT)
        if u.owner_addr != inp.payer_addr:
            return TxVerdict(False, Fault.WRONG_OWNER)
        if u.amount != inp.amount or u.shard != inp.shard:
            return TxVerdict(False, Fault.AMOUNT_MISMATCH)
    return VALID


def own_inputs_only(tx: Transaction, shard: int) -> bool:
    return all(i.shard == shard for i in tx.inputs)


# ---------------------------------------------------------------------------
# fraud proofs

class UnknownBlockHeader(KeyError):
    pass


@dataclass(frozen=True, slots=True)
class FraudItem:
    tx: Transaction
    label: Vote
    block_hash: Hash256
    tx_merkle_proof: MerkleProof


@dataclass(frozen=True, slots=True)
class FraudProof:
    item0: FraudItem
    item1: Optional[FraudItem]
    fault_type: Fault


register_record(FraudItem)
register_record(FraudProof)


def _item(body: TransactionBlock, leaves: Sequence[Hash256], index: int,
          block_hash: Hash256) -> FraudItem:
    return FraudItem(body.txs[index], body.labels[index], block_hash,
                     merkle_prove(leaves, index))


def _spend_item(rec: SpendRecord) -> FraudItem:
    leaves = tx_leaves(rec.body)
    for idx, (tx, lab) in enumerate(zip(rec.body.txs, rec.body.labels)):
        if tx == rec.tx and lab == rec.label:
            return FraudItem(tx, lab, rec.block_hash, merkle_prove(leaves, idx))
    raise ValueError("spend record does not match its body")


def make_fraud_proof(body: TransactionBlock, header_hash: Hash256, utxos: UtxoView,
                     scheme: SignatureScheme = DEFAULT_SCHEME) -> Optional[FraudProof]:
    """Proof for the first provably offending accepted transaction, if any.

    Inputs labelled REJECT are allowed to be invalid (they are packaged so
    the rejection can be testified), so only ACCEPT-labelled transactions
    are examined.
    """
    if not body.txs:
        return None
    leaves = tx_leaves(body)
    first_spender: dict[OutPoint, int] = {}
    for idx, (tx, label) in enumerate(zip(body.txs, body.labels)):
        if label is not Vote.ACCEPT or tx.kind not in (TxKind.DOMESTIC, TxKind.CROSS_INPUT):
            continue
        fault = stateless_fault(tx, scheme)
        if fault in (Fault.BAD_SIGNATURE, Fault.IMBALANCE, Fault.BAD_FORMAT):
            return FraudProof(_item(body, leaves, idx, header_hash), None, Fault.BAD_FORMAT)
        if fault is Fault.DOUBLE_SPEND:   # same outpoint twice inside one tx
            return FraudProof(_item(body, leaves, idx, header_hash), None, Fault.BAD_FORMAT)
        for inp in tx.inputs:
            if inp.ref in first_spender:
                j = first_spender[inp.ref]
                return FraudProof(_item(body, leaves, idx, header_hash),
                                  _item(body, leaves, j, header_hash), Fault.DOUBLE_SPEND)
            rec = utxos.spent_record(inp.ref)
            if rec is not None and utxos.get(inp.ref) is None:
                return FraudProof(_item(body, leaves, idx, header_hash),
                                  _spend_item(rec), Fault.DOUBLE_SPEND)
        for inp in tx.inputs:
            first_spender.setdefault(inp.ref, idx)
    return None


def _item_included(item: FraudItem, headers: Mapping[Hash256, ConsensusBlock]) -> bool:
    header = headers.get(item.block_hash)
    if header is None:
        raise UnknownBlockHeader(item.block_hash)
    return merkle_verify(header.tx_merkle_root, labeled_leaf(item.tx, item.label),
                         item.tx_merkle_proof)


def verify_fraud_proof(proof: FraudProof, known_headers: Mapping[Hash256, ConsensusBlock],
                       scheme: SignatureScheme = DEFAULT_SCHEME,
                       is_ancestor: Optional[Callable[[Hash256, Hash256], bool]] = None) -> bool:
    """Stateless check of a fraud proof against known headers.

    A double spend across two blocks only counts when the earlier block is
    an ancestor of the accused one; without an ancestry oracle such proofs
    are refused, since a conflicting tx on a competing fork proves nothing.
    """
    i0, i1 = proof.item0, proof.item1
    if i0.label is not Vote.ACCEPT or not _item_included(i0, known_headers):
        return False
    if proof.fault_type is Fault.BAD_FORMAT:
        if i1 is not None:
            return False
        return stateless_fault(i0.tx, scheme) is not None
    if proof.fault_type is not Fault.DOUBLE_SPEND or i1 is None:
        return False
    if i1.label is not Vote.ACCEPT or not _item_included(i1, known_headers):
        return False
    if i0.block_hash == i1.block_hash and \
            i0.tx_merkle_proof.leaf_index == i1.tx_merkle_proof.leaf_index:
        return False
    if not {i.ref for i in i0.tx.inputs} & {i.ref for i in i1.tx.inputs}:
        return False
    if i0.block_hash != i1.block_hash:
        return is_ancestor is not None and is_ancestor(i1.block_hash, i0.block_hash)
    return True


# ---------------------------------------------------------------------------
# GF(256) Reed-Solomon, systematic rate 1/2

def _gf_tables() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    exp = np.zeros(512, dtype=np.int64)
    log = np.zeros(256, dtype=np.int64)
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= 0x11D
    exp[255:510] = exp[:255]
    a = np.arange(256)
    mul = exp[(log[a][:, None] + log[a][None, :]) % 255].astype(np.uint8)
    mul[0, :] = 0
    mul[:, 0] = 0
    return exp, log, mul


_EXP, _LOG, _MUL = _gf_tables()


def gf_mul(a: int, b: int) -> int:
    return int(_MUL[a, b])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return int(_EXP[255 - _LOG[a]])


def _lagrange_matrix(src: Sequence[int], dst: Sequence[int]) -> np.ndarray:
    """Row t gives the weights mapping values at ``src`` to the value at dst[t]."""
    xs = np.asarray(src, dtype=np.int64)
    xd = np.asarray(dst, dtype=np.int64)
    k = len(xs)
    out = np.zeros((len(xd), k), dtype=np.uint8)
    diff = xs[:, None] ^ xs[None, :]
    np.fill_diagonal(diff, 1)                      # log 1 = 0, drops the l == j factor
    log_den = _LOG[diff].sum(axis=1)
    pos = {int(x): j for j, x in enumerate(xs)}
    for t, xt in enumerate(xd):
        j0 = pos.get(int(xt))
        if j0 is not None:                         # dst point is a source point
            out[t, j0] = 1
            continue
        logs = _LOG[xt ^ xs]
        log_num = logs.sum() - logs
        out[t] = _EXP[(log_num - log_den) % 255]
    return out


def _gf_matmul(coef: np.ndarray, data: np.ndarray) -> np.ndarray:
    out = np.zeros((coef.shape[0], data.shape[1]), dtype=np.uint8)
    for j in range(coef.shape[1]):
        col = coef[:, j]
        if col.any():
            # row t of _MUL[col] multiplies by coef[t, j]; then look up data row j
            out ^= _MUL[col][:, data[j]]
    return out


_MATRIX_CACHE: dict[tuple[tuple[int, ...], tuple[int, ...]], np.ndarray] = {}


def _cached_matrix(src: tuple[int, ...], dst: tuple[int, ...]) -> np.ndarray:
    key = (src, dst)
    m = _MATRIX_CACHE.get(key)
    if m is None:
        m = _lagrange_matrix(src, dst)
        if len(_MATRIX_CACHE) < 4096:
            _MATRIX_CACHE[key] = m
    return m


MAX_K = 128


class NotEnoughChunks(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class ChunkWithProof:
    index: int
    chunk: bytes
    proof: MerkleProof


@dataclass(frozen=True, slots=True)
class IncorrectCodingProof:
    commitment_root: Hash256
    k: int
    chunks: tuple[ChunkWithProof, ...]


register_record(ChunkWithProof)
register_record(IncorrectCodingProof)


class IncorrectCoding(ValueError):
    def __init__(self, proof: IncorrectCodingProof):
        super().__init__("chunks are not a codeword of the committed body")
        self.proof = proof


def chunk_leaf(index: int, chunk: bytes) -> Hash256:
    return sha256(index.to_bytes(4, "big") + chunk)


@dataclass(frozen=True)
class CodedCommitment:
    data_chunks: tuple[bytes, ...]
    parity_chunks: tuple[bytes, ...]
    commitment_root: Hash256
    k: int

    @property
    def chunks(self) -> tuple[bytes, ...]:
        return self.data_chunks + self.parity_chunks

    def leaves(self) -> list[Hash256]:
        return [chunk_leaf(i, c) for i, c in enumerate(self.chunks)]

    def chunk_with_proof(self, index: int) -> ChunkWithProof:
        return ChunkWithProof(index, self.chunks[index], merkle_prove(self.leaves(), index))

    def all_with_proofs(self) -> list[ChunkWithProof]:
        proofs = merkle_prove_all(self.leaves())
        return [ChunkWithProof(i, c, p) for (i, c), p in zip(enumerate(self.chunks), proofs)]


def choose_k(n_bytes: int, target_chunk: int = 256) -> int:
    k = 1
    while k < MAX_K and k * target_chunk < n_bytes:
        k *= 2
    return k


def extend_chunks(data: np.ndarray) -> np.ndarray:
    """Parity rows for a (k, L) array of data rows."""
    k = data.shape[0]
    return _gf_matmul(_cached_matrix(tuple(range(k)), tuple(range(k, 2 * k))), data)


def encode_bytes(payload: bytes, k: int) -> CodedCommitment:
    if k < 1 or k & (k - 1) or k > MAX_K:
        raise ValueError("k must be a power of two <= 128")
    framed = len(payload).to_bytes(4, "big") + payload
    width = max(1, -(-len(framed) // k))
    buf = np.frombuffer(framed.ljust(width * k, b"\x00"), dtype=np.uint8).reshape(k, width)
    parity = extend_chunks(buf)
    data_chunks = tuple(bytes(r) for r in buf)
    parity_chunks = tuple(bytes(r) for r in parity)
    leaves = [chunk_leaf(i, c) for i, c in enumerate(data_chunks + parity_chunks)]
    return CodedCommitment(data_chunks, parity_chunks, build_merkle(leaves), k)


def encode_body(body: TransactionBlock, k: Optional[int] = None) -> CodedCommitment:
    payload = canonical_encode(body)
    return encode_bytes(payload, k if k is not None else choose_k(len(payload)))


def _decode_payload(chunks: Mapping[int, bytes], k: int, root: Hash256,
                    evidence: Sequence[ChunkWithProof]) -> bytes:
    if len(chunks) < k:
        raise NotEnoughChunks(f"have {len(chunks)} of {k} chunks")
    widths = {len(c) for c in chunks.values()}
    bad = IncorrectCoding(IncorrectCodingProof(root, k, tuple(evidence)))
    if len(widths) != 1:
        raise bad
    idx = tuple(sorted(chunks)[:k])
    rows = np.stack([np.frombuffer(chunks[i], dtype=np.uint8) for i in idx])
    data = rows if idx == tuple(range(k)) else \
        _gf_matmul(_cached_matrix(idx, tuple(range(k))), rows)
    full = np.concatenate([data, extend_chunks(data)])
    for i, c in chunks.items():
        if bytes(full[i]) != c:
            raise bad
    leaves = [chunk_leaf(i, bytes(r)) for i, r in enumerate(full)]
    if build_merkle(leaves) != root:
        raise bad
    framed = data.tobytes()
    n = int.from_bytes(framed[:4], "big")
    if 4 + n > len(framed) or any(framed[4 + n:]):
        raise bad
    return framed[4:4 + n]


def reconstruct(chunks: Iterable[ChunkWithProof], k: int,
                commitment_root: Hash256) -> TransactionBlock:
    """Recover a body from any k proven chunks, or prove the coding is wrong."""
    good = [c for c in chunks if merkle_verify(commitment_root, chunk_leaf(c.index, c.chunk), c.proof)
            and 0 <= c.index < 2 * k]
    by_index = {c.index: c.chunk for c in good}
    payload = _decode_payload(by_index, k, commitment_root, good)
    try:
        body = canonical_decode(payload)
    except Exception:
        raise IncorrectCoding(IncorrectCodingProof(commitment_root, k, tuple(good)))
    if not isinstance(body, TransactionBlock):
        raise IncorrectCoding(IncorrectCodingProof(commitment_root, k, tuple(good)))
    return body


def verify_incorrect_coding(proof: IncorrectCodingProof) -> bool:
    """True iff the proven chunks do not decode to a consistent committed codeword."""
    good = [c for c in proof.chunks
            if merkle_verify(proof.commitment_root, chunk_leaf(c.index, c.chunk), c.proof)]
    if len(good) != len(proof.chunks) or len({c.index for c in good}) < proof.k:
        return False
    try:
        payload = _decode_payload({c.index: c.chunk for c in good}, proof.k,
                                  proof.commitment_root, good)
        body = canonical_decode(payload)
        return not isinstance(body, TransactionBlock)
    except IncorrectCoding:
        return True
    except Exception:
        return True


# ---------------------------------------------------------------------------
# sampling

def sample_budget(k: int, c: float = 2.0) -> int:
    return math.ceil(c * math.log2(2 * k))


def sample_indices(rng: np.random.Generator, k: int, c: float = 2.0) -> tuple[int, ...]:
    s = min(sample_budget(k, c), 2 * k)
    return tuple(int(i) for i in np.sort(rng.choice(2 * k, size=s, replace=False)))


def withholding_miss_probability(k: int, available: int, s: Optional[int] = None) -> float:
    """P(all s distinct samples hit the ``available`` chunks of 2k), hypergeometric."""
    n = 2 * k
    s = min(sample_budget(k), n) if s is None else s
    if available < s:
        return 0.0
    return math.comb(available, s) / math.comb(n, s)


@dataclass(frozen=True, slots=True)
class SampleRequest:
    block_hash: Hash256
    indices: tuple[int, ...]


@dataclass(frozen=True, slots=True)
class SampleResponse:
    block_hash: Hash256
    chunks: tuple[ChunkWithProof, ...]


register_record(SampleRequest)
register_record(SampleResponse)


def answer_samples(req: SampleRequest, coded: CodedCommitment,
                   withhold: Iterable[int] = ()) -> SampleResponse:
    skip = set(withhold)
    leaves = coded.leaves()
    return SampleResponse(req.block_hash, tuple(
        ChunkWithProof(i, coded.chunks[i], merkle_prove(leaves, i))
        for i in req.indices if i not in skip))


@dataclass
class AvailabilitySession:
    """Timer-driven sampling state machine for one foreign block.

    The window opens at header receipt and closes at ``deadline`` =
    receipt + 2*delta.  ``verdict`` is AVAILABLE once every requested index
    has been answered with a chunk whose proof checks against the
    commitment, UNAVAILABLE on deadline, bad coding or a fraud proof.
    """

    block_hash: Hash256
    commitment_root: Hash256
    k: int
    indices: tuple[int, ...]
    opened_at: float
    deadline: float
    received: dict[int, bytes] = field(default_factory=dict)
    verdict: Optional[Verdict] = None

    @classmethod
    def open(cls, block_hash: Hash256, commitment_root: Hash256, k: int, now: float,
             delta_i: float, rng: np.random.Generator) -> "AvailabilitySession":
        return cls(block_hash, commitment_root, k, sample_indices(rng, k), now, now + 2 * delta_i)

    def request(self) -> SampleRequest:
        return SampleRequest(self.block_hash, self.indices)

    def on_response(self, resp: SampleResponse, now: float) -> Optional[Verdict]:
        if self.verdict is not None or now > self.deadline:
            return None
        wanted = set(self.indices)
        for c in resp.chunks:
            if c.index in wanted and merkle_verify(self.commitment_root,
                                                   chunk_leaf(c.index, c.chunk), c.proof):
                self.received[c.index] = c.chunk
        if len(self.received) == len(self.indices):
            self.verdict = Verdict.AVAILABLE
            return self.verdict
        return None

    def on_deadline(self, now: float) -> Verdict:
        if self.verdict is None:
            self.verdict = Verdict.UNAVAILABLE
        return self.verdict

    def on_fraud_proof(self) -> Verdict:
        self.verdict = Verdict.UNAVAILABLE
        return self.verdict

    def on_incorrect_coding(self) -> Verdict:
        return self.on_fraud_proof()


def body_matches_header(body: TransactionBlock, header: ConsensusBlock) -> bool:
    tx_root, tmy_root = body_roots(body)
    return tx_root == header.tx_merkle_root and tmy_root == header.tmy_merkle_root
