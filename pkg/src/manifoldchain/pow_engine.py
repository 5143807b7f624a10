"""Proof-of-work solving, verification and 2-for-1 block classification."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core_model import (BlockKind, ConsensusBlock, Hash256, canonical_encode,
                         hash_of)

TWO_256 = 1 << 256
MAX_HASH = TWO_256 - 1
NONCE_SPACE = 1 << 64


class DifficultyError(ValueError):
    pass


class NotASolution(ValueError):
    pass


class RateTooHighForHashPower(ValueError):
    pass


@dataclass(frozen=True)
class Difficulty:
    """Thresholds: results below ``sigma`` solve, below ``sigma_prime`` are inclusive."""

    sigma: int
    sigma_prime: int

    def __post_init__(self):
        # sigma' == sigma is the all-inclusive case of a shard with lambda_i = 0
        if not 0 < self.sigma_prime <= self.sigma <= MAX_HASH:
            raise DifficultyError(
                f"need 0 < sigma' <= sigma <= 2^256-1, got {self.sigma_prime}, {self.sigma}")

    @property
    def p(self) -> float:
        """Per-query success probability sigma / 2^256."""
        return self.sigma / TWO_256

    @property
    def inclusive_share(self) -> float:
        return self.sigma_prime / self.sigma


@dataclass(frozen=True)
class PowSolution:
    parent_hash: Hash256
    info: Hash256
    nonce: int
    result: Hash256


def parent_hash_of(block: ConsensusBlock) -> Hash256:
    return hash_of((block.verified_parent, block.inter_parents, block.global_parents))


def info_of(block: ConsensusBlock) -> Hash256:
    return hash_of((block.shard_index, block.timestamp_us, block.tx_merkle_root,
                    block.tmy_merkle_root, block.availability_commitment))


def _seed(parent_hash: bytes, info: bytes) -> bytes:
    return hashlib.sha256(parent_hash + info).digest()


def _result(seed: bytes, nonce: int) -> Hash256:
    return Hash256(hashlib.sha256(seed + nonce.to_bytes(8, "big")).digest())


def pow_result(parent_hash: Hash256, info: Hash256, nonce: int) -> Hash256:
    return _result(_seed(parent_hash, info), nonce)


def pow_try(parent_hash: Hash256, info: Hash256, nonce: int,
            difficulty: Difficulty) -> Optional[PowSolution]:
    result = pow_result(parent_hash, info, nonce)
    if result.as_int() < difficulty.sigma:
        return PowSolution(parent_hash, info, nonce, result)
    return None


def block_hash(block: ConsensusBlock) -> Hash256:
    """Identity of a block: the PoW result over its own fields."""
    return pow_result(parent_hash_of(block), info_of(block), block.nonce)


def pow_verify(block: ConsensusBlock, difficulty: Difficulty) -> bool:
    return block_hash(block).as_int() < difficulty.sigma


def classify(result: Hash256, difficulty: Difficulty) -> BlockKind:
    r = result.as_int()
    if r >= difficulty.sigma:
        raise NotASolution("result is not below sigma")
    return BlockKind.INCLUSIVE if r < difficulty.sigma_prime else BlockKind.EXCLUSIVE


def solve(block: ConsensusBlock, difficulty: Difficulty, start_nonce: int = 0,
          max_tries: int = 1 << 24) -> Optional[ConsensusBlock]:
    """Brute-force nonces until the header solves the puzzle.

    Returns the header with the winning nonce, or None after ``max_tries``.
    The seed G(parent_hash, info) is computed once per header.
    """
    seed = _seed(parent_hash_of(block), info_of(block))
    nonce = start_nonce % NONCE_SPACE
    for _ in range(max_tries):
        if _result(seed, nonce).as_int() < difficulty.sigma:
            return replace(block, nonce=nonce)
        nonce = (nonce + 1) % NONCE_SPACE
    return None


def rates_to_difficulty(lambda_i: float, lambda_s: float,
                        shard_hash_queries_per_s: float) -> Difficulty:
    """Thresholds that realise exclusive rate ``lambda_i`` and inclusive rate
    ``lambda_s`` for a shard issuing the given number of hash queries per second.
    """
    if lambda_i < 0 or lambda_s <= 0 or shard_hash_queries_per_s <= 0:
        raise RateTooHighForHashPower("rates and query rate must be positive")
    p_total = (lambda_i + lambda_s) / shard_hash_queries_per_s
    if p_total > 1:
        raise RateTooHighForHashPower(
            f"target {lambda_i + lambda_s}/s exceeds {shard_hash_queries_per_s} queries/s")
    sigma = min(MAX_HASH, int(p_total * TWO_256))
    if lambda_i == 0:
        return Difficulty(sigma, sigma)
    sigma_prime = int(sigma * (lambda_s / (lambda_i + lambda_s)))
    return Difficulty(sigma, max(1, sigma_prime))


def shard_difficulties(lambda_s: float, lambda_i: list[float]) -> list[Difficulty]:
    """Simulation-mode thresholds for all shards with one global sigma'.

    Every shard is given the same hash query rate, equal to the fastest
    shard's total block rate, so the fastest shard succeeds on every query
    and sigma' = lambda_s / q * 2^256 is the same everywhere.
    """
    q = max(lambda_s + li for li in lambda_i)
    return [rates_to_difficulty(li, lambda_s, q) for li in lambda_i]


@dataclass
class PoissonMiner:
    """Exponential inter-arrival sampler for one shard's solution process."""

    rate: float
    rng: np.random.Generator

    def next_after(self, t: float) -> float:
        if self.rate <= 0:
            return float("inf")
        return t + float(self.rng.exponential(1.0 / self.rate))


def sample_arrivals(rate: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """All arrival times of a Poisson process on [0, horizon)."""
    if rate <= 0:
        return np.empty(0)
    n = rng.poisson(rate * horizon)
    return np.sort(rng.uniform(0.0, horizon, size=n))


def grind(block: ConsensusBlock, difficulty: Difficulty, rng: np.random.Generator,
          max_tries: int = 1 << 20) -> ConsensusBlock:
    """Random-start nonce search used when a simulated success fires.

    With simulation thresholds the expected number of tries is the ratio of
    the fastest shard's rate to this shard's rate, so this stays cheap.
    """
    start = int(rng.integers(0, NONCE_SPACE, dtype=np.uint64))
    solved = solve(block, difficulty, start_nonce=start, max_tries=max_tries)
    if solved is None:
        raise RuntimeError("nonce search exhausted; thresholds too tight for simulation")
    return solved


def header_bytes(block: ConsensusBlock) -> int:
    return len(canonical_encode(block))
