"""Command-line entry point.

Verbs:
    run            one scenario -> artifact directory
    compare        vio vs range_vio on byte-identical streams
    observability  nullspace reports for a scenario's trajectory
    sweep          Monte-Carlo seed sweep

Exit codes: 0 success, 2 configuration error, 3 filter divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError
from .harness import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    ScenarioConfig,
    compare_modes,
    run_observability,
    run_scenario,
    sweep,
)

logger = logging.getLogger(__name__)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="scenario JSON path")
    p.add_argument("--seed", type=int, default=None, help="override scenario seed")
    p.add_argument("--mode", choices=["vio", "range_vio"], default=None, help="override filter mode")
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rangevio", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("run", "compare", "observability"):
        _add_common(sub.add_parser(verb))
    sp = sub.add_parser("sweep")
    _add_common(sp)
    sp.add_argument("--seeds", type=int, default=10, help="number of seeds (0..n-1)")
    sp.add_argument("--workers", type=int, default=1)
    return p


def _load_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.from_json(args.config)
    if args.seed is not None:
        cfg = cfg.with_updates(seed=args.seed)
    if args.mode is not None:
        cfg = cfg.with_updates(mode=args.mode)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = _load_config(args)
    except (ConfigError, FileNotFoundError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out) if args.out else Path("runs") / args.verb

    try:
        if args.verb == "run":
            m = run_scenario(cfg, out_dir=out)
            print(
                f"mode={m.mode} seed={m.seed} max_err={m.max_pos_err:.4f} m "
                f"({m.pct_of_distance:.3f}% of {m.distance:.1f} m) diverged={m.diverged}"
            )
            return EXIT_DIVERGED if m.diverged else EXIT_OK
        if args.verb == "compare":
            res = compare_modes(cfg, out_dir=out)
            for mode, m in res.items():
                print(f"{mode}: max_err={m.max_pos_err:.4f} m ({m.pct_of_distance:.3f}%) diverged={m.diverged}")
            ratio = res["vio"].max_pos_err / max(res["range_vio"].max_pos_err, 1e-12)
            print(f"vio / range_vio max-error ratio: {ratio:.2f}")
            return EXIT_DIVERGED if any(m.diverged for m in res.values()) else EXIT_OK
        if args.verb == "observability":
            reports = run_observability(cfg, out_dir=out)
            for label, rep in reports.items():
                print(f"{label}: scale: {rep.verdicts.get('scale', 'n/a')} (nullity {rep.nullity})")
            return EXIT_OK
        if args.verb == "sweep":
            results = sweep(cfg, list(range(args.seeds)), out_dir=out, workers=args.workers)
            errs = sorted(m.max_pos_err for m in results)
            med = errs[len(errs) // 2]
            print(f"{len(results)} runs, median max_err={med:.4f} m, diverged={sum(m.diverged for m in results)}")
            return EXIT_DIVERGED if any(m.diverged for m in results) else EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
