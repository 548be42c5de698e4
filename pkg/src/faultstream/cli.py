"""Command-line entry points: train, stream, report, all.

Every subcommand takes an optional --config JSON file whose keys override
the experiment preset (nested "offline" and "online" objects override those
dataclasses). Failures print a stage-tagged message to stderr and exit
nonzero; success exits 0.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import datagen, model
from .harness import (ExperimentConfig, default_experiment, run_experiment,
                      regenerate_report, cumulative_accuracy, score_stream)
from .offline import OfflineConfig, train_offline
from .online import OnlineConfig, make_adapter


def load_experiment_config(path: str | None, scenario: str | None) -> ExperimentConfig:
    base = default_experiment(scenario or "I")
    if path is None:
        return base
    with open(path) as f:
        d = json.load(f)
    if scenario is None and "scenario" in d:
        base = default_experiment(d["scenario"])
    d.pop("scenario", None)
    if "offline" in d:
        base = replace(base, offline=OfflineConfig(**d.pop("offline")))
    if "online" in d:
        base = replace(base, online=OnlineConfig(**d.pop("online")))
    for key in ("faults", "adapters", "seeds", "segment_lengths"):
        if key in d:
            d[key] = tuple(d[key])
    return replace(base, **d)


def _build_data(cfg: ExperimentConfig, seed: int) -> datagen.ScenarioData:
    scen = cfg.scenario_config()
    if cfg.data_dir is not None:
        return datagen.build_scenario_from_dir(scen, cfg.data_dir, seed=seed)
    return datagen.build_scenario(scen, seed=seed)


def _cmd_train(args) -> int:
    cfg = load_experiment_config(args.config, args.scenario)
    if args.data_dir:
        cfg = replace(cfg, data_dir=args.data_dir)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    data = _build_data(cfg, args.seed)
    off_cfg = replace(cfg.offline, seed=args.seed)
    print(f"training on {len(data.offline)} windows "
          f"({cfg.scenario_config().n_domains} conditions, seed {args.seed})")
    result = train_offline(data.offline.x, data.offline.y, data.offline.c, off_cfg)
    ckpt = os.path.join(out_dir, f"checkpoint_seed{args.seed}.npz")
    model.save_checkpoint(ckpt, result.params, result.spec,
                          prototypes=result.prototypes,
                          anchor_bank=result.anchor_bank,
                          meta={"scenario": cfg.scenario, "seed": args.seed,
                                "offline": result.history[-1]})
    with open(os.path.join(out_dir, f"training_seed{args.seed}.csv"), "w",
              newline="") as f:
        w = csv.writer(f)
        w.writerow(("epoch", "lambda", "loss_cls", "loss_dom", "acc_cls", "acc_dom"))
        for h in result.history:
            w.writerow((h["epoch"], repr(h["lambda"]), repr(h["loss_cls"]),
                        repr(h["loss_dom"]), repr(h["acc_cls"]), repr(h["acc_dom"])))
    last = result.history[-1]
    print(f"saved {ckpt}")
    print(f"final training accuracy {last['acc_cls']:.4f}, "
          f"discriminator accuracy {last['acc_dom']:.4f}")
    return 0


def _cmd_stream(args) -> int:
    cfg = load_experiment_config(args.config, args.scenario)
    if args.data_dir:
        cfg = replace(cfg, data_dir=args.data_dir)
    ckpt = model.load_checkpoint(args.checkpoint)
    if ckpt.prototypes is None or ckpt.anchor_bank is None:
        raise ValueError(f"{args.checkpoint} has no prototype bank; "
                         "was it written by the train stage?")
    data = _build_data(cfg, args.seed)
    blocks = datagen.build_stream(data, args.fault, cfg.block_size)
    os.makedirs(args.out, exist_ok=True)
    trace = os.path.join(args.out,
                         f"trace_{args.fault}_{args.adapter}_seed{args.seed}.jsonl")

    class _Offline:
        params = ckpt.params
        prototypes = ckpt.prototypes
        anchor_bank = ckpt.anchor_bank

    adapter = make_adapter(args.adapter, _Offline, cfg.online, trace_path=trace)
    metrics = score_stream(adapter, blocks)
    adapter.close()
    out_csv = os.path.join(args.out,
                           f"stream_{args.fault}_{args.adapter}_seed{args.seed}.csv")
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("sample_index", "correct", "cumulative_accuracy", "segment"))
        for i in range(metrics.correct.size):
            w.writerow((i, int(metrics.correct[i]),
                        repr(float(metrics.cumulative[i])), metrics.tags[i]))
    print(f"streamed {metrics.correct.size} samples "
          f"({len(blocks)} blocks of up to {cfg.block_size})")
    print(f"final accuracy {metrics.final_accuracy:.4f}; trace at {trace}")
    return 0


def _cmd_report(args) -> int:
    regenerate_report(args.metrics, args.out)
    print(f"regenerated summary.csv and plots in {args.out}")
    return 0


def _cmd_all(args) -> int:
    cfg = load_experiment_config(args.config, args.scenario)
    if args.data_dir:
        cfg = replace(cfg, data_dir=args.data_dir)
    result = run_experiment(cfg, out_dir=args.out, progress=print)
    print()
    print(f"{'adapter':<10} {'fault':<14} mean final accuracy")
    for adapter, fault, acc in result.summary_rows():
        print(f"{adapter:<10} {fault:<14} {acc:.4f}")
    print(f"\nreport written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="faultstream",
        description="Condition-robust fault diagnosis with streaming adaptation.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the offline model and save a checkpoint")
    t.add_argument("--scenario", default=None, help="I, II, or a scenario JSON path")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="runs/train")
    t.add_argument("--config", default=None, help="experiment config JSON")
    t.add_argument("--data-dir", default=None,
                   help="directory of recording CSVs to use instead of the generator")
    t.set_defaults(func=_cmd_train)

    s = sub.add_parser("stream", help="run one adapter over one fault stream")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenario", default=None)
    s.add_argument("--fault", default="gear_wear")
    s.add_argument("--adapter", default="proposed",
                   choices=("proposed", "baseline", "naive"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="runs/stream")
    s.add_argument("--config", default=None)
    s.add_argument("--data-dir", default=None,
                   help="directory of recording CSVs to use instead of the generator")
    s.set_defaults(func=_cmd_stream)

    r = sub.add_parser("report", help="regenerate summary and plots from metrics.csv")
    r.add_argument("--metrics", required=True)
    r.add_argument("--out", default="runs/report")
    r.set_defaults(func=_cmd_report)

    a = sub.add_parser("all", help="full experiment: train, stream, report")
    a.add_argument("--scenario", default=None)
    a.add_argument("--out", default="runs/full")
    a.add_argument("--config", default=None)
    a.add_argument("--data-dir", default=None,
                   help="directory of recording CSVs to use instead of the generator")
    a.set_defaults(func=_cmd_all)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - single boundary for stage errors
        print(f"[{args.command}] error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
