"""Horizontal and vertical scaling, one seed, short runs.

Horizontal: add shards, each bringing one node from every bandwidth tier.
Vertical: raise the bandwidth of the 20 normal nodes while 5 stragglers stay
near 10 Mbps.  Uniform formation is pinned to the stragglers in both cases.
Run:  python3 demos/scaling_sweeps.py [duration]
"""

import sys

from scipy import stats

from manifoldchain.netsim import run
from manifoldchain.netsim import scenarios as S

duration = float(sys.argv[1]) if len(sys.argv) > 1 else 30.0

ms = [1, 2, 3, 4, 5]
print("horizontal: total tx/s by shard count")
for form in ("bcsf", "usf"):
    tps = [run(S.horizontal(m, form, duration), 1).throughput_total for m in ms]
    slope = stats.linregress(ms, tps).slope
    print(f"  {form}: " + "  ".join(f"{t:6.0f}" for t in tps) + f"   slope {slope:.0f}/shard")

mus = [35.0, 40.0, 45.0, 50.0, 54.0]
print("vertical: mean per-shard tx/s by normal-node bandwidth")
for form in ("bcsf", "usf"):
    tps = [run(S.vertical(mu, form, duration), 1).throughput_mean for mu in mus]
    print(f"  {form}: " + "  ".join(f"{t:6.0f}" for t in tps))
