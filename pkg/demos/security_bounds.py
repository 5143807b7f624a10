"""Closed-form security numbers next to their Monte Carlo checks.

Prints the common-prefix error bound against a simulated private-mining
attack, the honest-presence bound against random shard assignment, and the
rates the optimiser picks for a small heterogeneous deployment.
Run:  python3 demos/security_bounds.py
"""

import numpy as np

from manifoldchain.security_analysis import (
    cp_error_bound, empty_shard_mc, honest_presence_bound, optimize_rates, private_mining_mc,
    security_report, throughput_bound, wilson_upper,
)

rng = np.random.default_rng(0)
n = 100_000
print("private mining: p kappa  simulated  ci99-upper  bound")
for p in (0.7, 0.8, 0.9):
    for kappa in (6, 12):
        hits = private_mining_mc(p, kappa, n, rng)
        print(f"  {p:.1f} {kappa:5d}  {hits / n:9.2e}  {wilson_upper(hits, n):10.2e}  "
              f"{cp_error_bound(p, kappa):.2e}")

# the union bound is almost exact here, so the estimate wobbles around it
big = 1_000_000
hits = empty_shard_mc(20, 4, big, rng)
sd = (hits / big * (1 - hits / big) / big) ** 0.5
print(f"\nempty shard, 20 honest miners over 4 shards: {hits / big:.5f} +/- {sd:.5f} "
      f"(bound {honest_presence_bound(4, 1, 20):.5f})")

cfg = optimize_rates(4, [2.0, 1.0, 0.5, 0.25], 0.9, 100, 1e-3)
print(f"\noptimised rates: lambda_s={cfg.lambda_s:.4f}, lambda_i={[round(x, 4) for x in cfg.lambda_i]}")
print(security_report(cfg).table())
print("throughput bound (blocks/s):", round(throughput_bound(cfg, 1e-3)["total"], 3))
