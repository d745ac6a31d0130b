"""Command-line entry points for every pipeline stage and experiment."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .curation import (
    AlwaysIrrelevantJudge,
    ClassOracleJudge,
    ModelJudge,
    curate_all,
    load_curated,
    mine_from_index,
    save_curated,
)
from .data import (
    SyntheticTaskSpec,
    generate_corpus,
    instruction_pairs,
    load_corpus,
    save_corpus,
    split_roles,
)
from .experiment import (
    ExperimentConfig,
    evaluate_embedder,
    evaluate_two_stage,
    load_config,
    run_experiment,
)
from .model import Model, ModelConfig
from .profiler import emit_efficiency_table, measure_encode, token_budget
from .retrieval import (
    CandidateIndex,
    corpus_digest,
    load_qrels,
    save_qrels,
    save_results,
)
from .trainer import (
    StagePlan,
    check_predecessor,
    load_stage_checkpoint,
    run_global_hnm,
    run_reranker,
    run_stage1,
    run_stage3,
    run_warmup,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _write_manifest(out_dir: Path, payload: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(payload)
    payload["manifest_hash"] = hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2))


def _side_manifest(args, command: str, **extra):
    """Per-run manifest next to --out: enough to reproduce bit-for-bit."""
    if not getattr(args, "out", None):
        return
    payload = {"command": command,
               "seed": getattr(args, "seed", None),
               "config": getattr(args, "config", None), **extra}
    if getattr(args, "corpus", None):
        payload["corpus_hash"] = corpus_digest(args.corpus)
    payload["manifest_hash"] = hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
    with open(str(args.out) + ".manifest.json", "w") as f:
        json.dump(payload, f, indent=2)


def _model_cfg(args) -> ModelConfig:
    d = ModelConfig().to_dict()
    if args.config:
        with open(args.config) as f:
            d.update(json.load(f).get("model", {}))
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return ModelConfig.from_dict(d)


def _make_judge(name: str, noise: float, seed: int, ckpt):
    if name == "oracle":
        return ClassOracleJudge(noise_rate=noise, seed=seed)
    if name == "rule":
        return AlwaysIrrelevantJudge()
    if name == "model":
        if ckpt is None:
            raise ValueError("--ckpt required for the model judge")
        return ModelJudge(Model.load(ckpt))
    raise ValueError(f"unknown judge {name!r}")


def cmd_gen_data(args) -> int:
    cfg = _model_cfg(args)
    d = SyntheticTaskSpec().to_dict()
    if args.config:
        with open(args.config) as f:
            d.update(json.load(f).get("data", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    spec = SyntheticTaskSpec.from_dict(d)
    candidates, queries, qrels = generate_corpus(spec, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(out / "corpus.jsonl", candidates + queries)
    save_qrels(out / "qrels.tsv", qrels)
    _write_manifest(out, {"command": "gen-data", "data": spec.to_dict(),
                          "model": cfg.to_dict(),
                          "corpus_hash": corpus_digest(out / "corpus.jsonl")})
    print(f"wrote {len(candidates)} candidates, {len(queries)} queries to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    examples = load_corpus(args.corpus)
    candidates, queries = split_roles(examples)
    stage = args.stage
    if args.in_ckpt:
        from .trainer import REQUIRED_PREDECESSOR
        model = load_stage_checkpoint(args.in_ckpt, REQUIRED_PREDECESSOR[stage])
    else:
        check_predecessor(stage, None)
        model = Model(_model_cfg(args))
    plan = StagePlan(stage=stage, steps=args.steps, batch_size=args.batch_size,
                     peak_lr=args.lr, seed=args.seed or 0, n_hard=args.n_hard,
                     output_checkpoint=args.out)
    if stage == "restore":
        pairs = instruction_pairs(candidates, args.seed or 0, model.cfg.vocab_size)
        report = run_stage1(model, pairs, plan)
    elif stage == "warmup":
        report = run_warmup(model, candidates, queries, plan)
    elif stage == "global_hnm":
        report = run_global_hnm(model, candidates, queries, plan)
    elif stage == "judge_ft":
        curated = load_curated(args.curated)
        report = run_stage3(model, candidates, queries, curated, plan)
    else:  # reranker
        curated = load_curated(args.curated)
        plan.epochs = args.epochs
        report = run_reranker(model, candidates, queries, curated, plan)
    report.save_trace_csv(str(args.out) + ".trace.csv")
    _side_manifest(args, "train", stage=stage, in_ckpt=args.in_ckpt,
                   steps=plan.steps, batch_size=plan.batch_size,
                   lr=plan.peak_lr, config_hash=report.config_hash)
    print(f"{stage}: final loss {report.final_loss:.4f} "
          f"({len(report.loss_trace)} steps, {report.wall_clock:.1f}s)")
    return EXIT_OK


def cmd_mine(args) -> int:
    examples = load_corpus(args.corpus)
    candidates, queries = split_roles(examples)
    model = Model.load(args.ckpt)
    index = CandidateIndex.build(model.embed_many(candidates))
    qembs = model.embed_many(queries)
    records = []
    for i, (q, e) in enumerate(zip(queries, qembs)):
        rec = mine_from_index(q.example_id, e.vector, index, q.gt_positive_id,
                              n=args.n, window=tuple(args.window),
                              seed=(args.seed or 0) * 100003 + i)
        records.append({"query_id": rec.query_id, "negative_ids": rec.negative_ids,
                        "window": list(rec.window), "seed": rec.seed,
                        "shrunk": rec.shrunk})
    with open(args.out, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    _side_manifest(args, "mine", ckpt=args.ckpt, n=args.n, window=list(args.window))
    print(f"mined negatives for {len(records)} queries -> {args.out}")
    return EXIT_OK


def cmd_judge(args) -> int:
    examples = load_corpus(args.corpus)
    candidates, queries = split_roles(examples)
    judge = _make_judge(args.judge, args.noise, args.seed or 0, args.ckpt)
    embed_model = Model.load(args.ckpt) if args.ckpt else Model(_model_cfg(args))
    wanted = [q for q in queries if args.query_id in (None, q.example_id)]
    samples = curate_all(wanted, candidates, embed_model.embed_many, judge,
                         template_id=args.template, k=min(args.k, len(candidates)))
    for s in samples:
        for v in s.verdicts:
            print(f"{s.query_id}\t{v.candidate_id}\t{v.logit_yes!r}\t"
                  f"{v.logit_no!r}\t{v.verdict}")
    return EXIT_OK


def cmd_curate(args) -> int:
    examples = load_corpus(args.corpus)
    candidates, queries = split_roles(examples)
    judge = _make_judge(args.judge, args.noise, args.seed or 0, args.ckpt)
    embed_model = Model.load(args.ckpt) if args.ckpt else Model(_model_cfg(args))
    train_q = [q for q in queries if q.split == "train"]
    samples = curate_all(train_q, candidates, embed_model.embed_many, judge,
                         template_id=args.template, k=min(args.k, len(candidates)))
    save_curated(args.out, samples)
    _side_manifest(args, "curate", ckpt=args.ckpt, judge=args.judge,
                   noise=args.noise, k=args.k, template=args.template)
    print(f"curated {len(samples)} queries -> {args.out}")
    return EXIT_OK


def _eval_common(args, two_stage: bool) -> int:
    examples = load_corpus(args.corpus)
    candidates, queries = split_roles(examples)
    qrels = load_qrels(args.qrels)
    eval_q = [q for q in queries if q.split == "eval"] or queries
    model = Model.load(args.ckpt)
    from .experiment import embed_results
    results = embed_results(model, candidates, eval_q, k=min(10, len(candidates)))
    if two_stage:
        from .experiment import model_scorer, oracle_scorer
        from .retrieval import rerank_topk
        by_id = {c.example_id: c for c in candidates}
        reranker = Model.load(args.reranker_ckpt) if args.reranker_ckpt else None
        results = [rerank_topk(r, model_scorer(reranker, q, by_id) if reranker
                               else oracle_scorer(q.example_id, qrels),
                               k_rerank=min(5, len(r.ids)))
                   for q, r in zip(eval_q, results)]
    from .retrieval import ndcg_at_5, precision_at_1
    metrics = {"p_at_1": precision_at_1(results, qrels),
               "ndcg_at_5": ndcg_at_5(results, qrels)}
    if args.out:
        save_results(args.out, results)
        _side_manifest(args, "rerank-eval" if two_stage else "eval",
                       ckpt=args.ckpt,
                       reranker_ckpt=getattr(args, "reranker_ckpt", None))
    print(json.dumps({"stage": results[0].stage, **metrics}))
    return EXIT_OK


def cmd_eval(args) -> int:
    return _eval_common(args, two_stage=False)


def cmd_rerank_eval(args) -> int:
    return _eval_common(args, two_stage=True)


def cmd_profile(args) -> int:
    from .data import class_pattern
    from .autograd import Grid2D
    from .model import MultimodalExample, with_compression
    factors = [int(x) for x in args.factors.split(",")]
    base = ModelConfig.from_dict({**ModelConfig().to_dict(),
                                  "patch_h": args.grid, "patch_w": args.grid,
                                  "max_seq_len": args.grid * args.grid + 32,
                                  "seed": args.seed or 0})
    profiles = []
    for s in factors:
        cfg = with_compression(base, s)
        model = Model(cfg)
        rng = np.random.default_rng(cfg.seed)
        grid = Grid2D(rng.normal(0, 1, (cfg.patch_h, cfg.patch_w, cfg.vision_channels)))
        cand = MultimodalExample(example_id="pc", role="candidate", visual=grid)
        query = MultimodalExample(example_id="pq", role="query",
                                  text=(20, 21, 22, 23))
        profiles.append(measure_encode(model, query, trials=args.trials, label=f"s={s}"))
        profiles.append(measure_encode(model, cand, trials=args.trials, label=f"s={s}"))
        print(f"s={s}: candidate visual tokens {token_budget(cfg)}")
    tables = emit_efficiency_table(profiles)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "efficiency.md").write_text(tables["markdown"])
    (out / "efficiency.csv").write_text(tables["csv"])
    print(tables["markdown"])
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig(preset=args.preset)
    if args.seed is not None:
        cfg.seeds = [args.seed + i for i in range(len(cfg.seeds))]
    report = run_experiment(cfg, out_dir=args.out)
    from .experiment import report_markdown
    print(report_markdown(report))
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="vtembed", description="Compressed multimodal embedding pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=False, ckpt=False, qrels=False):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", default=None)
        if corpus:
            sp.add_argument("--corpus", required=True)
        if ckpt:
            sp.add_argument("--ckpt", default=None)
        if qrels:
            sp.add_argument("--qrels", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic corpus + qrels")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="run one training stage")
    common(sp, corpus=True)
    sp.add_argument("--stage", required=True,
                    choices=["restore", "warmup", "global_hnm", "judge_ft", "reranker"])
    sp.add_argument("--in-ckpt", default=None)
    sp.add_argument("--curated", default=None)
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--n-hard", type=int, default=12)
    sp.add_argument("--epochs", type=int, default=2)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("mine", help="global hard negative mining")
    common(sp, corpus=True, ckpt=True)
    sp.add_argument("--n", type=int, default=2)
    sp.add_argument("--window", type=int, nargs=2, default=[50, 100])
    sp.set_defaults(func=cmd_mine)

    for name, fn in (("judge", cmd_judge), ("curate", cmd_curate)):
        sp = sub.add_parser(name, help=f"{name} retrieved candidates")
        common(sp, corpus=True, ckpt=True)
        sp.add_argument("--judge", default="oracle", choices=["oracle", "rule", "model"])
        sp.add_argument("--noise", type=float, default=0.0)
        sp.add_argument("--k", type=int, default=20)
        sp.add_argument("--template", default="T2I")
        if name == "judge":
            sp.add_argument("--query-id", default=None)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("eval", help="embed-only retrieval evaluation")
    common(sp, corpus=True, qrels=True)
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rerank-eval", help="two-stage retrieval evaluation")
    common(sp, corpus=True, qrels=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--reranker-ckpt", default=None)
    sp.set_defaults(func=cmd_rerank_eval)

    sp = sub.add_parser("profile", help="token budgets and encode latency")
    common(sp)
    sp.add_argument("--factors", default="1,2")
    sp.add_argument("--grid", type=int, default=16)
    sp.add_argument("--trials", type=int, default=5)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("experiment", help="run an ablation preset")
    common(sp)
    sp.add_argument("--preset", default="table4", choices=["table4", "table5"])
    sp.set_defaults(func=cmd_experiment)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures map to exit 2
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


def main():
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
