"""Bandwidth-clustered vs uniform shard formation on a five-tier network.

Twenty-five nodes sit in five bandwidth tiers (5 to 60 Mbps).  Clustering
puts each tier in its own shard, so fast shards can run at their own block
delay; uniform formation mixes tiers and every shard waits for the slowest
node.  Run:  python3 demos/tiered_comparison.py [duration] [seed]
"""

import sys

from manifoldchain.netsim import run
from manifoldchain.netsim import scenarios as S

duration = float(sys.argv[1]) if len(sys.argv) > 1 else 30.0
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 1

for form in ("bcsf", "usf"):
    r = run(S.tiered(form, duration=duration), seed)
    print(f"\n{form.upper()}  total {r.throughput_total:.0f} tx/s, forking {r.forking_rate:.2%}")
    print("  shard  delay(s)  lambda_i   tx/s")
    for i, (d, li, tp) in enumerate(zip(r.shard_delta, r.lambda_i, r.throughput_per_shard)):
        print(f"  {i:5d}  {d:8.3f}  {li:8.4f}  {tp:6.0f}")
