#!/usr/bin/env python3
"""Stage-3 hard-negative sweep: count n x judge type (oracle vs rule-based).

Each cell trains its own stage-3 copy from a shared warmup+HNM prefix and
reports median P@1 over seeds.
"""

import argparse
import json

from vtembed.experiment import ExperimentConfig, load_config, report_markdown, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None, help="experiment config JSON")
    ap.add_argument("--seed", type=int, default=0, help="base seed")
    ap.add_argument("--seeds", type=int, default=5, help="number of seeds")
    ap.add_argument("--n-values", type=int, nargs="+", default=[0, 4, 8, 12, 16, 20])
    ap.add_argument("--out", default="runs/table5", help="output directory")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.preset = "table5"
    cfg.seeds = [args.seed + i for i in range(args.seeds)]
    cfg.sweep_n_hard = args.n_values
    report = run_experiment(cfg, out_dir=args.out)
    print(report_markdown(report))
    if report["failures"]:
        print("failures:", json.dumps(report["failures"], indent=2))


if __name__ == "__main__":
    main()
