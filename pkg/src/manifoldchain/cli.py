"""Command-line front end: ``analyze``, ``simulate`` and ``verify-bounds``.

Exit codes: 0 success, 2 configuration error, 3 a bound was violated in
``verify-bounds``.  Set MANIFOLD_LOG to DEBUG/INFO/WARNING for progress output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .security_analysis import (Infeasible, PiOutOfRange, RateConfig, cp_error_bound,
                                optimize_rates, private_mining_mc, security_report,
                                throughput_bound, wilson_upper)

log = logging.getLogger("manifoldchain")

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION = 0, 2, 3


class ConfigError(Exception):
    pass


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _write(out_dir: Optional[str], name: str, text: str) -> Optional[Path]:
    if out_dir is None:
        return None
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    p = d / name
    p.write_text(text)
    return p


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


# -- analyze -------------------------------------------------------------------

def rate_config_from(d: dict) -> RateConfig:
    """Either explicit rates (RateConfig fields) or an optimisation request.

    An optimisation request has ``optimize: true`` with m, rho, kappa_prime,
    epsilon and either delta_i (seconds) or lowest_bandwidth_mbps per shard.
    """
    try:
        if not d.get("optimize"):
            return RateConfig.from_dict(d)
        extra = {k: d[k] for k in ("block_size_B", "delta_p", "tx_per_block") if k in d}
        if "delta_i" in d:
            deltas = [float(x) for x in d["delta_i"]]
        else:
            size = float(d.get("block_size_B", 547_140.0))
            bw = [float(c) * 1e6 / 8 for c in d["lowest_bandwidth_mbps"]]
            deltas = RateConfig.delays_from_bandwidth(size, bw, float(d.get("delta_p", 0.0)))
        return optimize_rates(int(d["m"]), deltas, float(d["rho"]), int(d["kappa_prime"]),
                              float(d["epsilon"]), **extra)
    except Infeasible as e:
        raise ConfigError(f"infeasible: {e}") from None
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad rate config: {e!r}") from None


def cmd_analyze(args) -> int:
    d = _read_json(args.config)
    cfg = rate_config_from(d)
    rep = security_report(cfg)
    out = {"rates": cfg.to_dict(), "gamma": [cfg.gamma(i) for i in range(cfg.m)],
           "security": rep.to_dict()}
    if "P_bar" in d:
        out["throughput"] = throughput_bound(cfg, float(d["P_bar"]))
    text = _dumps(out)
    if _write(args.out_dir, "security_report.json", text) is None:
        sys.stdout.write(text)
    print(f"lambda_s = {cfg.lambda_s:.6g}/s, lambda_i = "
          + ", ".join(f"{x:.6g}" for x in cfg.lambda_i), file=sys.stderr)
    print(rep.table(), file=sys.stderr)
    return EXIT_OK


# -- simulate --------------------------------------------------------------------

SUMMARY_FIELDS = ("throughput_total", "throughput_mean", "forking_rate", "latency_mean",
                  "safety_violations", "invalid_confirmed", "atomicity_violations")


def _load_scenario(spec: str):
    from .netsim import ConfigInvalid, Scenario
    from .netsim.scenarios import PRESETS, preset
    if spec.startswith("preset:") or spec in PRESETS:
        try:
            return preset(spec.removeprefix("preset:"))
        except KeyError as e:
            raise ConfigError(str(e)) from None
    try:
        return Scenario.load(spec)
    except ConfigInvalid as e:
        raise ConfigError(str(e)) from None


def _row(rep) -> dict:
    return {
        "scenario": rep.scenario, "formation": rep.formation, "seed": rep.seed,
        "throughput_total": rep.throughput_total, "throughput_mean": rep.throughput_mean,
        "forking_rate": rep.forking_rate, "latency_mean": rep.latency["mean"],
        "safety_violations": rep.safety_violations, "invalid_confirmed": rep.invalid_confirmed,
        "atomicity_violations": rep.atomicity_violations, "digest": rep.digest,
    }


def _aggregate(rows: list[dict]) -> list[dict]:
    out = []
    keys = sorted({(r["scenario"], r["formation"]) for r in rows})
    for name, form in keys:
        grp = [r for r in rows if (r["scenario"], r["formation"]) == (name, form)]
        agg = {"scenario": name, "formation": form, "runs": len(grp)}
        for f in SUMMARY_FIELDS:
            xs = np.array([r[f] for r in grp if r[f] is not None], dtype=float)
            agg[f + "_mean"] = float(xs.mean()) if xs.size else None
            agg[f + "_std"] = float(xs.std(ddof=1)) if xs.size > 1 else 0.0 if xs.size else None
        out.append(agg)
    return out


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    import io
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def parse_seeds(text: Optional[str], default: list[int]) -> list[int]:
    if not text:
        return default
    seeds: list[int] = []
    try:
        for part in text.split(","):
            if "-" in part.strip()[1:]:
                a, b = part.split("-", 1)
                seeds.extend(range(int(a), int(b) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None
    return seeds


def cmd_simulate(args) -> int:
    from .netsim import ConfigInvalid, run
    sc = _load_scenario(args.config)
    seeds = parse_seeds(args.seeds, list(sc.seeds))
    forms = [sc.formation]
    if args.compare:
        forms = [f.strip() for f in args.compare.split(",") if f.strip()]
        bad = [f for f in forms if f not in ("bcsf", "usf")]
        if bad:
            raise ConfigError(f"--compare takes bcsf and/or usf, got {bad}")
    rows = []
    for form in forms:
        try:
            variant = sc.with_(formation=form, **({"duration": args.duration} if args.duration else {}))
        except ConfigInvalid as e:
            raise ConfigError(str(e)) from None
        for seed in sorted(seeds):
            log.info("running %s/%s seed %d", variant.name, form, seed)
            try:
                rep = run(variant, seed)
            except ConfigInvalid as e:
                raise ConfigError(f"{variant.name} seed {seed}: {e}") from None
            rows.append(_row(rep))
            stem = f"{variant.name}-{form}-s{seed}"
            _write(args.out_dir, stem + ".json", rep.to_json() + "\n")
            series = [{"t": t, "diverged_shards": int(k)} for t, k in rep.divergence_series]
            _write(args.out_dir, stem + "-divergence.csv", _csv(series))
            log.info("  total %.1f tx/s, forking %s", rep.throughput_total, rep.forking_rate)
    summary = _aggregate(rows)
    _write(args.out_dir, "runs.csv", _csv(rows))
    _write(args.out_dir, "summary.csv", _csv(summary))
    sys.stdout.write(_csv(summary))
    return EXIT_OK


# -- verify-bounds ----------------------------------------------------------------

def _mc_cell(cell: dict, trials: int, rng: np.random.Generator) -> dict:
    p, kappa = float(cell["p"]), int(cell["kappa"])
    bound = cp_error_bound(p, kappa) if 0.5 <= p < 1 else math.inf
    row = {"kind": "random_walk", "p": p, "kappa": kappa, "bound": bound, "trials": trials}
    if bound >= 1:
        return dict(row, successes=None, rate=None, ci_upper=None, verdict="vacuous")
    try:
        hits = private_mining_mc(p, kappa, trials, rng)
    except PiOutOfRange:
        return dict(row, successes=None, rate=None, ci_upper=None, verdict="vacuous")
    up = wilson_upper(hits, trials)
    return dict(row, successes=hits, rate=hits / trials, ci_upper=up,
                verdict="pass" if up <= bound else "violated")


def _sim_cell(cell: dict) -> dict:
    """End-to-end check: fraction of seeds with a consistency violation."""
    from .netsim import resolve, run
    from .security_analysis import honest_fraction_p
    sc = _load_scenario(cell["scenario"])
    seeds = [int(s) for s in cell.get("seeds", range(10))]
    res = resolve(sc, seeds[0])
    adv = sum(n.hash_power_share for n in res.nodes if not n.honest)
    shard = int(sc.adversary.get("target_shard", 0))
    cfg = res.rates
    probe = RateConfig(cfg.m, cfg.lambda_s, cfg.lambda_i, cfg.delta_i, 1.0,
                       [1.0] * cfg.m, sc.kappa)
    # honest fraction of shard-local blocks, discounted for forks within the delay
    p = (1 - adv) * honest_fraction_p(probe, shard)
    bound = cp_error_bound(p, sc.kappa) if 0.5 <= p < 1 else math.inf
    hits = sum(1 for s in seeds if run(sc, s).safety_violations > 0)
    n = len(seeds)
    # violated only if even the 99% lower confidence limit exceeds the bound
    lo = 1 - wilson_upper(n - hits, n)
    verdict = "vacuous" if bound >= 1 else ("violated" if lo > bound else "pass")
    return {"kind": "simulation", "p": p, "kappa": sc.kappa, "bound": bound, "trials": n,
            "successes": hits, "rate": hits / n, "ci_upper": wilson_upper(hits, n), "verdict": verdict}


def cmd_verify_bounds(args) -> int:
    g = _read_json(args.config)
    cells = g.get("cells")
    if not isinstance(cells, list) or not cells:
        raise ConfigError("grid needs a non-empty 'cells' list")
    trials = int(g.get("trials", 100_000))
    seeds = parse_seeds(args.seeds, [int(g.get("seed", 0))])
    rng = np.random.default_rng(seeds[0])
    rows = []
    try:
        for cell in cells:
            rows.append(_sim_cell(cell) if "scenario" in cell else _mc_cell(cell, trials, rng))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad grid cell: {e!r}") from None
    _write(args.out_dir, "verify_bounds.csv", _csv(rows))
    _write(args.out_dir, "verify_bounds.json", _dumps(rows))
    for r in rows:
        rate = "-" if r["rate"] is None else f"{r['rate']:.3e}"
        up = "-" if r["ci_upper"] is None else f"{r['ci_upper']:.3e}"
        print(f"{r['kind']:11s} p={r['p']:.4f} kappa={r['kappa']:3d} bound={r['bound']:.3e} "
              f"rate={rate} ci99={up} {r['verdict'].upper()}")
    return EXIT_VIOLATION if any(r["verdict"] == "violated" for r in rows) else EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="manifoldchain", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("analyze", "security report for a rate config"),
                           ("simulate", "run scenarios in the simulator"),
                           ("verify-bounds", "check the consistency bound against oracles")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True,
                       help="JSON file (simulate also accepts preset:NAME)")
        p.add_argument("--seeds", help="comma list or ranges, e.g. 1,2,5-8")
        p.add_argument("--compare", help="formations to run side by side, e.g. usf,bcsf")
        p.add_argument("--out-dir", help="directory for JSON/CSV artifacts")
        p.add_argument("--duration", type=float, help="override simulated seconds")
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("MANIFOLD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING)
                        if not level.isdigit() else int(level),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handler = {"analyze": cmd_analyze, "simulate": cmd_simulate,
               "verify-bounds": cmd_verify_bounds}[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
