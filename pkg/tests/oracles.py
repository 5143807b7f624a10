"""Independent re-evaluations of the closed forms in extended precision.

Written from the formulas directly, sharing no code with the package.
Inputs are taken as exact binary floats, so the comparison measures only
the package's rounding.
"""

import mpmath as mp

mp.mp.dps = 50


def honest_fraction_p(m, lambda_s, lambda_i, rho, rho_i, delta_i):
    ls, li = mp.mpf(lambda_s), mp.mpf(lambda_i)
    mix = (li * mp.mpf(rho_i) + m * ls * mp.mpf(rho)) / (li + m * ls)
    return mix * mp.exp(-(li + ls) * mp.mpf(delta_i))


def cp_error_bound(p, kappa):
    p = mp.mpf(p)
    return (2 + 2 * mp.sqrt(p / (1 - p))) * (4 * p * (1 - p)) ** kappa


def honest_presence_bound(s_x, s_y, n):
    m = mp.mpf(s_x * s_y)
    if m == 1:
        return mp.mpf(0)
    return (m - 1) * ((m - 1) / m) ** (mp.mpf(n) - 1)


def delta_bar(P_bar, kappa, lam, delta):
    pb = mp.exp(-mp.mpf(lam) * mp.mpf(delta))
    root = (mp.mpf(P_bar) / (2 + 2 * mp.sqrt(pb / (1 - pb)))) ** (mp.mpf(1) / kappa)
    return (1 + mp.sqrt(1 - root)) / 2


def throughput_total(m, lambda_s, lambda_i, delta_i, rho, rho_i, kappa, P_bar, tx_per_block=1):
    """(1/Delta) log(rho / delta_bar) (m rho + sum gamma_i rho_i), with
    delta_bar at lambda_s and the smallest shard delay."""
    d = delta_bar(P_bar, kappa, lambda_s, min(delta_i))
    unit = mp.log(mp.mpf(rho) / d) / mp.mpf(max(delta_i)) * tx_per_block
    gam = [mp.mpf(x) / mp.mpf(lambda_s) for x in lambda_i]
    return unit * (m * mp.mpf(rho) + sum(g * mp.mpf(r) for g, r in zip(gam, rho_i)))


def rel_err(got, want):
    want = mp.mpf(want)
    if want == 0:
        return abs(mp.mpf(got))
    return abs((mp.mpf(got) - want) / want)


def formula_grids(n=100, seed=20240):
    """n argument tuples per formula, drawn from a fixed generator."""
    import numpy as np
    rng = np.random.default_rng(seed)
    u = lambda lo, hi: float(rng.uniform(lo, hi))
    hf, cp, hp, db, tp = [], [], [], [], []
    for _ in range(n):
        m = int(rng.integers(1, 65))
        rho = u(0.51, 1.0)
        hf.append((m, u(1e-4, 2.0), u(0.0, 5.0), rho, u(0.0, 1.0), u(0.0, 20.0)))
        cp.append((u(0.5, 0.999), int(rng.integers(1, 101))))
        hp.append((int(rng.integers(1, 20)), int(rng.integers(1, 20)), u(1.0, 2000.0)))
        lam, dl = u(0.01, 1.0), u(0.05, 10.0)
        db.append((u(1e-9, 0.5), int(rng.integers(1, 200)), lam, dl))
        k = int(rng.integers(1, 9))
        delays = sorted(u(0.1, 20.0) for _ in range(k))
        tp.append((k, lam, [u(0.0, 3.0) for _ in range(k)], delays, rho,
                   [u(0.0, 1.0) for _ in range(k)], int(rng.integers(1, 200)), u(1e-9, 0.5)))
    return {"honest_fraction_p": hf, "cp_error_bound": cp, "honest_presence_bound": hp,
            "delta_bar": db, "throughput_bound": tp}
