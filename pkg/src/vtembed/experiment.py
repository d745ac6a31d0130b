"""End-to-end pipeline slices, ablation presets, and run manifests.

`table4` reproduces the cumulative-component ablation layout (warmup /
+global-HNM / +judge-FT / +reranker); `table5` sweeps the number and type
of stage-3 hard negatives (judge-based vs rule-based top-K-minus-positive).
Metrics are directional at desk scale; absolute values carry no meaning.
"""

from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from . import vocab
from .curation import AlwaysIrrelevantJudge, ClassOracleJudge, curate_all
from .data import SyntheticTaskSpec, generate_corpus, instruction_pairs, split_roles
from .model import Model, ModelConfig, MultimodalExample
from .prompts import pointwise_prompt
from .retrieval import (
    CandidateIndex,
    Qrels,
    RankedResult,
    ndcg_at_5,
    precision_at_1,
    rerank_topk,
    search,
)
from .trainer import (
    StagePlan,
    run_global_hnm,
    run_reranker,
    run_stage1,
    run_stage3,
    run_warmup,
)

CONFIG_SCHEMA_VERSION = 1


class ExperimentConfigError(ValueError):
    pass


@dataclass
class TrainSettings:
    stage1_steps: int = 60
    warmup_steps: int = 200    # deliberately short: leaves headroom for HNM
    hnm_steps: int = 400
    stage3_steps: int = 300
    batch_size: int = 8
    peak_lr: float = 3e-3
    stage3_lr: float = 1e-3    # gentler fine-tuning on judge hard negatives
    n_hard: int = 12
    judge_noise: float = 0.0
    judge_k: int = 20
    reranker: str = "oracle"  # "oracle" | "trained"
    reranker_epochs: int = 2
    temperature: float = 0.03


@dataclass
class ExperimentConfig:
    preset: str = "table4"
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    sweep_n_hard: List[int] = field(default_factory=lambda: [0, 4, 8, 12, 16, 20])

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "preset": self.preset,
            "seeds": self.seeds,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "train": {k: getattr(self.train, k)
                      for k in self.train.__dataclass_fields__},
            "sweep_n_hard": self.sweep_n_hard,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        version = d.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ExperimentConfigError(f"config schema version {version} unsupported")
        return cls(
            preset=d.get("preset", "table4"),
            seeds=list(d.get("seeds", [0, 1, 2, 3, 4])),
            model=ModelConfig.from_dict({**ModelConfig().to_dict(), **d.get("model", {})}),
            data=SyntheticTaskSpec.from_dict(
                {**SyntheticTaskSpec().to_dict(), **d.get("data", {})}),
            train=TrainSettings(**d.get("train", {})),
            sweep_n_hard=list(d.get("sweep_n_hard", [0, 4, 8, 12, 16, 20])))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return ExperimentConfig.from_dict(json.load(f))


# ---- evaluation ----

def embed_results(model: Model, candidates: Sequence[MultimodalExample],
                  queries: Sequence[MultimodalExample], k: int = 10
                  ) -> List[RankedResult]:
    index = CandidateIndex.build(model.embed_many(list(candidates)))
    qembs = model.embed_many(list(queries))
    k = min(k, len(index))
    return [search(index, e.vector, k=k, query_id=q.example_id)
            for q, e in zip(queries, qembs)]


def evaluate_embedder(model: Model, candidates: Sequence[MultimodalExample],
                      queries: Sequence[MultimodalExample], qrels: Qrels,
                      k: int = 10) -> Dict[str, float]:
    results = embed_results(model, candidates, queries, k=k)
    return {"p_at_1": precision_at_1(results, qrels),
            "ndcg_at_5": ndcg_at_5(results, qrels)}


def oracle_scorer(query_id: str, qrels: Qrels) -> Callable[[str], float]:
    """Rerank scorer consistent with ground truth: margin +1 if relevant."""
    rel = qrels[query_id]
    return lambda cid: 1.0 if rel.get(cid, 0) > 0 else -1.0


def model_scorer(reranker: Model, query: MultimodalExample,
                 by_id: Dict[str, MultimodalExample]) -> Callable[[str], float]:
    """Pointwise YES-NO logit margin from a trained reranker."""
    def score(cid: str) -> float:
        prompt = pointwise_prompt(query, by_id[cid], reranker.cfg)
        logits = reranker.next_token_logits(prompt)
        return float(logits[vocab.YES] - logits[vocab.NO])
    return score


def evaluate_two_stage(model: Model, candidates: Sequence[MultimodalExample],
                       queries: Sequence[MultimodalExample], qrels: Qrels,
                       reranker: Optional[Model] = None, k: int = 10,
                       k_rerank: int = 5) -> Dict[str, float]:
    """Embed-retrieve then pointwise-rerank the top k_rerank; oracle
    scorer when no reranker model is given."""
    by_id = {c.example_id: c for c in candidates}
    results = embed_results(model, candidates, queries, k=k)
    reranked = []
    for q, r in zip(queries, results):
        scorer = (model_scorer(reranker, q, by_id) if reranker is not None
                  else oracle_scorer(q.example_id, qrels))
        reranked.append(rerank_topk(r, scorer, k_rerank=min(k_rerank, len(r.ids))))
    return {"p_at_1": precision_at_1(reranked, qrels),
            "ndcg_at_5": ndcg_at_5(reranked, qrels)}


# ---- pipeline per seed ----

@dataclass
class SeedRun:
    seed: int
    metrics: Dict[str, Dict[str, float]]
    loss_traces: Dict[str, List[float]]


def _plan(stage: str, steps: int, tr: TrainSettings, seed: int, **kw) -> StagePlan:
    lr = tr.stage3_lr if stage == "judge_ft" else tr.peak_lr
    return StagePlan(stage=stage, steps=steps, batch_size=tr.batch_size,
                     peak_lr=lr, seed=seed, temperature=tr.temperature, **kw)


def run_seed_pipeline(cfg: ExperimentConfig, seed: int,
                      stages: Sequence[str] = ("warmup", "global_hnm", "judge_ft", "reranker"),
                      ) -> SeedRun:
    """Run the cumulative pipeline for one seed, evaluating after each
    requested stage on the held-out queries."""
    tr = cfg.train
    mcfg = ModelConfig.from_dict({**cfg.model.to_dict(), "seed": seed})
    dspec = SyntheticTaskSpec.from_dict({**cfg.data.to_dict(), "seed": seed})
    candidates, queries, qrels = generate_corpus(dspec, mcfg)
    eval_q = [q for q in queries if q.split == "eval"]
    train_q = [q for q in queries if q.split == "train"]

    metrics: Dict[str, Dict[str, float]] = {}
    traces: Dict[str, List[float]] = {}
    model = Model(mcfg)

    pairs = instruction_pairs(candidates, dspec.seed, mcfg.vocab_size)
    r1 = run_stage1(model, pairs, _plan("restore", tr.stage1_steps, tr, seed))
    traces["restore"] = r1.loss_trace
    restore_model = model.clone()  # reranker branches from here

    if "warmup" in stages:
        rw = run_warmup(model, candidates, queries, _plan("warmup", tr.warmup_steps, tr, seed))
        traces["warmup"] = rw.loss_trace
        metrics["warmup"] = evaluate_embedder(model, candidates, eval_q, qrels)
    if "global_hnm" in stages:
        rh = run_global_hnm(model, candidates, queries,
                            _plan("global_hnm", tr.hnm_steps, tr, seed))
        traces["global_hnm"] = rh.loss_trace
        metrics["global_hnm"] = evaluate_embedder(model, candidates, eval_q, qrels)

    curated = None
    if "judge_ft" in stages or "reranker" in stages:
        judge = ClassOracleJudge(noise_rate=tr.judge_noise, seed=seed)
        curated = curate_all(train_q, candidates, model.embed_many, judge,
                             template_id=dspec.task_class, k=min(tr.judge_k, len(candidates)))
    if "judge_ft" in stages:
        r3 = run_stage3(model, candidates, queries, curated,
                        _plan("judge_ft", tr.stage3_steps, tr, seed, n_hard=tr.n_hard))
        traces["judge_ft"] = r3.loss_trace
        metrics["judge_ft"] = evaluate_embedder(model, candidates, eval_q, qrels)
    if "reranker" in stages:
        reranker_model = None
        if tr.reranker == "trained":
            reranker_model = restore_model
            rr = run_reranker(reranker_model, candidates, queries, curated,
                              _plan("reranker", 0, tr, seed, epochs=tr.reranker_epochs))
            traces["reranker"] = rr.loss_trace
        metrics["reranker"] = evaluate_two_stage(model, candidates, eval_q, qrels,
                                                 reranker=reranker_model)
    return SeedRun(seed=seed, metrics=metrics, loss_traces=traces)


def run_table5_seed(cfg: ExperimentConfig, seed: int,
                    n_values: Sequence[int], arms: Sequence[str] = ("mllm", "rule"),
                    ) -> Dict[str, Dict[str, float]]:
    """Stage-3 sweep for one seed: hard-negative count x judge type.

    The prefix through global-HNM is shared; each (arm, n) trains its own
    stage-3 copy from that checkpoint.
    """
    tr = cfg.train
    mcfg = ModelConfig.from_dict({**cfg.model.to_dict(), "seed": seed})
    dspec = SyntheticTaskSpec.from_dict({**cfg.data.to_dict(), "seed": seed})
    candidates, queries, qrels = generate_corpus(dspec, mcfg)
    eval_q = [q for q in queries if q.split == "eval"]
    train_q = [q for q in queries if q.split == "train"]

    model = Model(mcfg)
    run_stage1(model, instruction_pairs(candidates, dspec.seed, mcfg.vocab_size),
               _plan("restore", tr.stage1_steps, tr, seed))
    run_warmup(model, candidates, queries, _plan("warmup", tr.warmup_steps, tr, seed))
    run_global_hnm(model, candidates, queries, _plan("global_hnm", tr.hnm_steps, tr, seed))

    judges = {"mllm": ClassOracleJudge(noise_rate=tr.judge_noise, seed=seed),
              "rule": AlwaysIrrelevantJudge()}
    out: Dict[str, Dict[str, float]] = {}
    for arm in arms:
        curated = curate_all(train_q, candidates, model.embed_many, judges[arm],
                             template_id=dspec.task_class,
                             k=min(tr.judge_k, len(candidates)))
        for n in n_values:
            m = model.clone()
            run_stage3(m, candidates, queries, curated,
                       _plan("judge_ft", tr.stage3_steps, tr, seed, n_hard=n))
            out[f"{arm}:n={n}"] = evaluate_embedder(m, candidates, eval_q, qrels)
    return out


# ---- report assembly ----

STAGE_LABELS = {"warmup": "warmup", "global_hnm": "+global-HNM",
                "judge_ft": "+judge-FT", "reranker": "+reranker"}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Execute the configured preset and assemble a consolidated report."""
    rows: List[dict] = []
    traces: Dict[str, Dict[str, List[float]]] = {}
    failures: List[dict] = []
    if cfg.preset == "table4":
        runs = []
        for seed in cfg.seeds:
            try:
                runs.append(run_seed_pipeline(cfg, seed))
            except Exception as exc:  # partial report with failure annotation
                failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
        for run in runs:
            traces[str(run.seed)] = run.loss_traces
        for stage in ("warmup", "global_hnm", "judge_ft", "reranker"):
            per_seed = {str(r.seed): r.metrics[stage]["p_at_1"] for r in runs}
            if not per_seed:
                continue
            rows.append({
                "config": STAGE_LABELS[stage],
                **{f"seed{slot}": per_seed[slot] for slot in per_seed},
                "median_p_at_1": statistics.median(per_seed.values()),
                "median_ndcg_at_5": statistics.median(
                    r.metrics[stage]["ndcg_at_5"] for r in runs),
            })
    elif cfg.preset == "table5":
        per_seed_tables = {}
        for seed in cfg.seeds:
            try:
                per_seed_tables[seed] = run_table5_seed(cfg, seed, cfg.sweep_n_hard)
            except Exception as exc:
                failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
        if not per_seed_tables:
            raise ExperimentConfigError("all seeds failed: " + json.dumps(failures))
        done_seeds = sorted(per_seed_tables)
        keys = list(next(iter(per_seed_tables.values())))
        for key in keys:
            vals = {str(seed): per_seed_tables[seed][key]["p_at_1"]
                    for seed in done_seeds}
            rows.append({"config": key,
                         **{f"seed{slot}": vals[slot] for slot in vals},
                         "median_p_at_1": statistics.median(vals.values())})
    else:
        raise ExperimentConfigError(f"unknown preset {cfg.preset!r}")

    report = {
        "preset": cfg.preset,
        "rows": rows,
        "failures": failures,
        "loss_traces": traces,
        "manifest": {
            "config_hash": cfg.config_hash(),
            "seeds": cfg.seeds,
            "config": cfg.to_dict(),
        },
    }
    report["manifest"]["content_id"] = hashlib.sha256(
        json.dumps({"rows": rows, "traces": traces}, sort_keys=True).encode()
    ).hexdigest()[:16]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2))
        (out / "report.md").write_text(report_markdown(report))
        (out / "report.csv").write_text(report_csv(report))
        (out / "manifest.json").write_text(json.dumps(report["manifest"], indent=2))
    return report


def _columns(rows: List[dict]) -> List[str]:
    cols: List[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def _cell(row: dict, col: str) -> str:
    v = row.get(col)
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def report_markdown(report: dict) -> str:
    cols = _columns(report["rows"])
    lines = ["| " + " | ".join(cols) + " |",
             "|" + "|".join("---" for _ in cols) + "|"]
    lines += ["| " + " | ".join(_cell(r, c) for c in cols) + " |"
              for r in report["rows"]]
    return "\n".join(lines) + "\n"


def report_csv(report: dict) -> str:
    cols = _columns(report["rows"])
    lines = [",".join(cols)]
    lines += [",".join(_cell(r, c) for c in cols) for r in report["rows"]]
    return "\n".join(lines) + "\n"
