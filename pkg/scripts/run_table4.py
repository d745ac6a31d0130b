#!/usr/bin/env python3
"""Cumulative-pipeline ablation: warmup / +global-HNM / +judge-FT / +reranker.

Runs the full progressive pipeline for several seeds on a synthetic corpus
and reports median P@1 / NDCG@5 per configuration.
"""

import argparse
import json

from vtembed.experiment import ExperimentConfig, load_config, report_markdown, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None, help="experiment config JSON")
    ap.add_argument("--seed", type=int, default=0, help="base seed")
    ap.add_argument("--seeds", type=int, default=5, help="number of seeds")
    ap.add_argument("--out", default="runs/table4", help="output directory")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.preset = "table4"
    cfg.seeds = [args.seed + i for i in range(args.seeds)]
    report = run_experiment(cfg, out_dir=args.out)
    print(report_markdown(report))
    if report["failures"]:
        print("failures:", json.dumps(report["failures"], indent=2))


if __name__ == "__main__":
    main()
