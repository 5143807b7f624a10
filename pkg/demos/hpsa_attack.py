"""Hash-power-spread attack with and without body validation.

Two colluding nodes in shard 1 mine a block whose body carries a bad
signature.  With validation honest nodes refuse to build on it; with the
ablation they confirm it and the shard's view diverges.
Run:  python3 demos/hpsa_attack.py [seed]
"""

import sys

from manifoldchain.netsim import run
from manifoldchain.netsim import scenarios as S

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
for validation in (True, False):
    r = run(S.hpsa(validation), seed)
    label = "validation on " if validation else "validation off"
    print(f"{label}: invalid block planted={r.adversary['invalid_block'] is not None}, "
          f"honest nodes confirming it={r.invalid_confirmed}, divergence={r.divergence_observed}")
