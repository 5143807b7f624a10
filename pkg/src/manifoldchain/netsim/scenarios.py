"""Built-in scenario presets at desk scale.

Every preset returns a plain ``Scenario``; the CLI can dump them as JSON
so a user can start from one and edit it.
"""

from __future__ import annotations

from typing import Callable

from .config import Scenario

TIERS = (5.0, 10.0, 20.0, 40.0, 60.0)
AUTO_RATES = {"mode": "auto", "rho": 1.0, "kappa_prime": 1000, "epsilon": 1e-3}


def tiered(formation: str = "bcsf", duration: float = 60.0, cross_ratio: float = 0.0,
           m: int = 5, name: str = "") -> Scenario:
    """m groups of nodes, one per bandwidth tier, 5 nodes each (25 nodes for m=5)."""
    bws = [b for b in TIERS for _ in range(5)]
    return Scenario.from_dict({
        "name": name or f"tiered-{formation}",
        "m": m,
        "formation": formation,
        "nodes": {"bandwidths": bws},
        "rates": dict(AUTO_RATES),
        "duration": duration,
        "workload": {"tx_rate": 1.0, "cross_ratio": cross_ratio},
    })


def horizontal(m: int, formation: str = "bcsf", duration: float = 60.0) -> Scenario:
    """m shards of 5 nodes; each added shard brings one node of every tier."""
    bws = [b for _ in range(m) for b in TIERS]
    return Scenario.from_dict({
        "name": f"horizontal-m{m}-{formation}",
        "m": m,
        "formation": formation,
        "nodes": {"bandwidths": bws},
        "rates": dict(AUTO_RATES),
        "duration": duration,
        "workload": {"tx_rate": 1.0},
    })


def vertical(mu: float, formation: str = "bcsf", duration: float = 60.0) -> Scenario:
    """5 stragglers around 10 Mbps plus 20 normal nodes around ``mu`` Mbps, 5 shards."""
    return Scenario.from_dict({
        "name": f"vertical-mu{mu:g}-{formation}",
        "m": 5,
        "formation": formation,
        "nodes": {"groups": [{"count": 5, "mean": 10.0, "std": 2.0},
                             {"count": 20, "mean": float(mu), "std": 7.0}],
                  "min_mbps": 1.0},
        "rates": dict(AUTO_RATES),
        "duration": duration,
        "workload": {"tx_rate": 1.0},
    })


def latency(cross_ratio: float, duration: float = 60.0) -> Scenario:
    """Tiered BCSF roster with an open-loop user workload and a given cross-shard share."""
    sc = tiered("bcsf", duration, cross_ratio, name=f"latency-x{cross_ratio:g}")
    return sc.with_(workload={"tx_rate": 4.0, "cross_ratio": cross_ratio, "stop_before": 10.0})


def hpsa(validation: bool = True, duration: float = 40.0) -> Scenario:
    """Two dishonest nodes in one shard plant a block whose body breaks a signature."""
    sc = tiered("bcsf", duration, name="hpsa" if validation else "hpsa-ablation")
    return sc.with_(
        validation=validation,
        adversary={"kind": "hpsa", "target_shard": 1, "count": 2, "t_attack": 5.0},
        rates=dict(AUTO_RATES, rho=0.9),
    )


def private_mining(adversary_share: float = 0.46, duration: float = 300.0) -> Scenario:
    """One shard, ten nodes; the highest ids pool ``adversary_share`` of the hash power."""
    n, n_adv = 10, 2
    honest = (1.0 - adversary_share) / (n - n_adv)
    shares = [honest] * (n - n_adv) + [adversary_share / n_adv] * n_adv
    return Scenario.from_dict({
        "name": "private-mining",
        "m": 1,
        "formation": "bcsf",
        "nodes": {"bandwidths": [20.0] * n, "hash_power": shares},
        "adversary": {"kind": "private_mining", "count": n_adv, "target_shard": 0,
                      "enforce_rho": False},
        "rates": {"mode": "explicit", "lambda_s": 0.5, "lambda_i": [0.0]},
        "duration": duration,
        "workload": {"tx_rate": 1.0},
    })


PRESETS: dict[str, Callable[[], Scenario]] = {
    "tiered-bcsf": lambda: tiered("bcsf"),
    "tiered-usf": lambda: tiered("usf"),
    "horizontal-m5": lambda: horizontal(5),
    "vertical-mu45": lambda: vertical(45.0),
    "latency-x0.5": lambda: latency(0.5),
    "hpsa": lambda: hpsa(True),
    "hpsa-ablation": lambda: hpsa(False),
    "private-mining": lambda: private_mining(),
}


def preset(name: str) -> Scenario:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
