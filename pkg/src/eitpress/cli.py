"""Command-line front end: simulate, reconstruct, table1, verify."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness


def _apply_overrides(scenario, args):
    changes = {}
    if getattr(args, "delta", None) is not None:
        changes["delta_h"] = args.delta
    if getattr(args, "beta", None) is not None:
        changes["beta"] = args.beta
    if getattr(args, "noise", None) is not None:
        changes["noise"] = args.noise
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "merge_pairs", False):
        changes["merge_pairs"] = True
    return replace(scenario, **changes) if changes else scenario


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eitpress",
        description="Membrane pressure sensing with boundary current-voltage data")
    parser.add_argument("--verbose", action="store_true",
                        help="log pipeline progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="forward-simulate a scenario")
    sim.add_argument("scenario", help="scenario JSON file")
    rec = sub.add_parser("reconstruct", help="invert a difference dataset")
    rec.add_argument("scenario", help="scenario JSON file")
    rec.add_argument("w_file", help="difference dataset CSV from simulate")
    for p in (sim, rec):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--delta", type=float, default=None,
                       help="reduction radius in units of the element side h")
        p.add_argument("--beta", type=float, default=None,
                       help="regularization weight (default: discrepancy rule)")
        p.add_argument("--noise", type=float, default=None,
                       help="relative Gaussian noise level")
        p.add_argument("--seed", type=int, default=None, help="noise seed")
        p.add_argument("--merge-pairs", action="store_true",
                       help="merge symmetric element pairs into single columns")

    tab = sub.add_parser("table1", help="reduced sensitivity-system sizes")
    tab.add_argument("shape", choices=["square", "disk"])
    tab.add_argument("--out", default=None, help="also write the report as JSON")

    ver = sub.add_parser("verify", help="run the invariant checks")
    ver.add_argument("--fast", action="store_true",
                     help="skip the expensive refinement and decay checks")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "simulate":
        scenario = _apply_overrides(harness.load_scenario(args.scenario), args)
        manifest = harness.run_simulate(scenario, args.out)
        print(f"simulated '{scenario.name}': "
              f"{len(manifest['artifacts'])} artifacts in {args.out}")
        return 0

    if args.command == "reconstruct":
        scenario = _apply_overrides(harness.load_scenario(args.scenario), args)
        harness.run_reconstruct(scenario, args.w_file, args.out)
        results = json.loads((Path(args.out) / "results.json").read_text())
        m = results["metrics"]
        print(f"reconstructed '{scenario.name}': IoU={m['iou']:.3f}, "
              f"beta={results['beta']:.3e}, "
              f"residual={results['residual']:.3e} -> {args.out}")
        return 0

    if args.command == "table1":
        report = harness.run_table1(args.shape)
        print(harness.format_table1(report))
        if args.out:
            Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2))
        return 0

    if args.command == "verify":
        checks = harness.run_verify(fast=args.fast)
        print(harness.format_verify(checks))
        return 0 if all(c.passed for c in checks) else 1

    return 2


if __name__ == "__main__":
    sys.exit(main())
