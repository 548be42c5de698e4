#!/usr/bin/env python3
"""Run both built-in scenarios end to end and print the summary tables.

Writes metrics.csv / summary.csv / one SVG per fault for each scenario
under --out (default results/), same layout the CLI produces. This is the
whole desk experiment: offline training plus the three adapters streamed
over every (seed, fault) pair.
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from faultstream import harness


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results", help="output root directory")
    ap.add_argument("--scenarios", default="I,II",
                    help="comma-separated subset of the built-in scenarios")
    ap.add_argument("--seeds", default=None,
                    help="comma-separated seed override, e.g. 0,1")
    args = ap.parse_args(argv)

    overrides = {}
    if args.seeds:
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))

    for scen in args.scenarios.split(","):
        cfg = harness.default_experiment(scen.strip(), **overrides)
        out_dir = os.path.join(args.out, f"scenario_{scen.strip()}")
        t0 = time.time()
        result = harness.run_experiment(cfg, out_dir=out_dir)
        dt = time.time() - t0

        print(f"\nscenario {scen.strip()}  ({dt:.0f}s, outputs in {out_dir})")
        print(f"  {'adapter':<10} {'fault':<14} {'final acc':>9}")
        for adapter, fault, acc in result.summary_rows():
            print(f"  {adapter:<10} {fault:<14} {acc:9.4f}")
        for adapter in cfg.adapters:
            print(f"  {adapter:<10} {'(all faults)':<14} "
                  f"{result.mean_final_accuracy(adapter):9.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
