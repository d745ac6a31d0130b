#!/usr/bin/env python3
"""Token-budget and latency comparison across compression factors.

Emits a (config, #VT_q, l_q, #VT_c, l_c) table for an image-bearing
candidate and a text-only query, one row per compression factor.
"""

import argparse
from pathlib import Path

import numpy as np

from vtembed.autograd import Grid2D
from vtembed.model import Model, ModelConfig, MultimodalExample, with_compression
from vtembed.profiler import emit_efficiency_table, measure_encode, token_budget


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--factors", type=int, nargs="+", default=[1, 2, 4])
    ap.add_argument("--grid", type=int, default=16, help="feature grid side")
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/efficiency")
    args = ap.parse_args()

    base = ModelConfig(patch_h=args.grid, patch_w=args.grid,
                       max_seq_len=args.grid * args.grid + 32, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    profiles = []
    for s in args.factors:
        cfg = with_compression(base, s)
        model = Model(cfg)
        grid = Grid2D(rng.normal(0, 1, (cfg.patch_h, cfg.patch_w, cfg.vision_channels)))
        cand = MultimodalExample(example_id="c", role="candidate", visual=grid)
        query = MultimodalExample(example_id="q", role="query", text=(30, 31, 32, 33))
        profiles.append(measure_encode(model, query, trials=args.trials, label=f"s={s}"))
        profiles.append(measure_encode(model, cand, trials=args.trials, label=f"s={s}"))
        print(f"s={s}: candidate visual tokens = {token_budget(cfg)}")

    tables = emit_efficiency_table(profiles)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "efficiency.md").write_text(tables["markdown"])
    (out / "efficiency.csv").write_text(tables["csv"])
    print(tables["markdown"])


if __name__ == "__main__":
    main()
