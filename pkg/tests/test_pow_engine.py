import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from manifoldchain.core_model import BlockKind, ConsensusBlock, Hash256, canonical_decode, canonical_encode, sha256
from manifoldchain.pow_engine import (
    MAX_HASH, Difficulty, DifficultyError, NotASolution, RateTooHighForHashPower,
    block_hash, classify, grind, pow_try, pow_verify, rates_to_difficulty, sample_arrivals,
    shard_difficulties, solve,
)

PH, INFO = sha256(b"parent"), sha256(b"info")


def header(nonce=0, shard=0):
    g = sha256(b"g")
    return ConsensusBlock(shard, g, (g,), ((shard, g),), 1_000, nonce,
                          sha256(b"t"), sha256(b"m"), sha256(b"a"))


def test_max_sigma_accepts_every_nonce():
    d = Difficulty(MAX_HASH, MAX_HASH)
    assert all(pow_try(PH, INFO, n, d) is not None for n in range(200))


def test_zero_sigma_rejected():
    with pytest.raises(DifficultyError):
        Difficulty(0, 0)
    with pytest.raises(DifficultyError):
        Difficulty(10, 11)


def test_success_fraction_matches_p():
    d = Difficulty(2**252, 2**251)
    n = 100_000
    hits = sum(pow_try(PH, INFO, k, d) is not None for k in range(n))
    p = 2**-4
    assert abs(hits - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_verify_round_trip_and_mutation():
    d = Difficulty(2**250, 2**249)
    b = solve(header(), d)
    assert b is not None and pow_verify(b, d)
    # any header field change moves the result; with p = 2^-6 it almost surely fails
    mutated = [ConsensusBlock(b.shard_index, b.verified_parent, b.inter_parents, b.global_parents,
                              b.timestamp_us + k, b.nonce, b.tx_merkle_root, b.tmy_merkle_root,
                              b.availability_commitment) for k in range(1, 6)]
    assert sum(pow_verify(x, d) for x in mutated) <= 1
    assert pow_verify(canonical_decode(canonical_encode(b)), d)


def test_verify_rejects_result_above_sigma():
    b = header(nonce=7)
    r = block_hash(b).as_int()
    assert not pow_verify(b, Difficulty(max(1, r), max(1, r)))
    assert pow_verify(b, Difficulty(r + 1, 1))


def test_classify_boundaries():
    d = Difficulty(1000, 300)
    assert classify(Hash256.from_int(0), d) is BlockKind.INCLUSIVE
    assert classify(Hash256.from_int(299), d) is BlockKind.INCLUSIVE
    assert classify(Hash256.from_int(300), d) is BlockKind.EXCLUSIVE
    with pytest.raises(NotASolution):
        classify(Hash256.from_int(1000), d)


def test_inclusive_fraction_one_third():
    sigma = 3 * 2**250
    d = Difficulty(sigma, 2**250)
    rng = np.random.default_rng(7)
    n = 100_000
    results = [Hash256.from_int(int(x) * 2**200) for x in rng.integers(0, sigma >> 200, size=n)]
    inc = sum(classify(r, d) is BlockKind.INCLUSIVE for r in results)
    assert abs(inc - n / 3) <= 3 * math.sqrt(n * (1 / 3) * (2 / 3))


@given(st.integers(1, 2**256 - 1), st.integers(0, 2**256 - 1))
def test_classify_partitions_solutions(sig, r):
    sp = max(1, sig // 3)
    d = Difficulty(sig, sp)
    if r < sig:
        assert classify(Hash256.from_int(r), d) in (BlockKind.INCLUSIVE, BlockKind.EXCLUSIVE)
    else:
        with pytest.raises(NotASolution):
            classify(Hash256.from_int(r), d)


def test_rates_to_difficulty_examples():
    d0 = rates_to_difficulty(0.0, 0.5, 10.0)
    assert d0.sigma_prime == d0.sigma
    d1 = rates_to_difficulty(0.5, 0.5, 10.0)
    assert abs(d1.sigma_prime - d1.sigma / 2) <= 1
    assert d1.p == pytest.approx(0.1)
    with pytest.raises(RateTooHighForHashPower):
        rates_to_difficulty(5.0, 6.0, 10.0)


def test_rates_realised_by_random_oracle_thinning():
    lam_i, lam_s, q = 0.02, 0.01, 1.0
    d = rates_to_difficulty(lam_i, lam_s, q)
    rng = np.random.default_rng(3)
    horizon = 10_000.0
    queries = sample_arrivals(q, horizon, rng)
    results = rng.integers(0, 2**63, size=queries.size).astype(object) * 2**193
    excl = sum(1 for r in results if d.sigma_prime <= r < d.sigma)
    incl = sum(1 for r in results if r < d.sigma_prime)
    assert abs(excl / horizon - lam_i) <= 0.05 * lam_i + 3 * math.sqrt(lam_i / horizon)
    assert abs(incl / horizon - lam_s) <= 0.05 * lam_s + 3 * math.sqrt(lam_s / horizon)


def test_global_sigma_prime():
    ds = shard_difficulties(0.2, [0.0, 0.3, 1.0])
    assert len({d.sigma_prime for d in ds}) == 1
    assert ds[0].sigma == ds[0].sigma_prime
    assert ds[2].sigma == MAX_HASH or ds[2].p == pytest.approx(1.0)


def test_arrivals_are_poisson():
    rng = np.random.default_rng(11)
    t = sample_arrivals(0.03, 200_000.0, rng)
    gaps = np.diff(t)
    # Kolmogorov-Smirnov against Exp(0.03)
    assert stats.kstest(gaps, "expon", args=(0, 1 / 0.03)).pvalue > 0.01
    counts = np.bincount((t // 100).astype(int), minlength=2000)
    lam = 3.0
    obs = np.bincount(np.minimum(counts, 8), minlength=9)
    exp = [stats.poisson.pmf(k, lam) for k in range(8)] + [stats.poisson.sf(7, lam)]
    chi = stats.chisquare(obs, np.array(exp) * counts.size)
    assert chi.pvalue > 0.01


def test_grind_finds_solution():
    d = shard_difficulties(0.2, [0.0, 0.3])[0]
    b = grind(header(), d, np.random.default_rng(0))
    assert pow_verify(b, d)
