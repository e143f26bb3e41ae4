"""Experiment harness: ablation and KG-scale sweeps, metrics and reports.

Within one seed, the four ablation variants share the pretrained weights,
the train/test split and the KG embeddings; they differ only in which KG
rows enter the encoder and in the similarity pathway.  The scale sweep
re-trains KG embeddings per subgraph while the test set stays fixed, so
fractions are compared on identical denominators.  Runs are reproducible
bit-exactly from their manifest in sequential mode (per kernel backend).
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import statistics
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from . import __version__, _kernels
from .data import (CATEGORIES, QAExample, SyntheticKGSpec, gen_qa,
                   gen_synthetic_kg, split)
from .embeddings import EmbeddingTable, TransEConfig, train_kg_embeddings
from .kg import InvalidFractionError, KnowledgeGraph, subgraph_fraction
from .model import (ModelConfig, ModelParams, VARIANTS, Vocabulary,
                    build_augmented_input, build_vocab, greedy_decode)
from .trainer import LossSpec, TrainConfig, finetune, prepare_examples, pretrain

CSV_COLUMNS = ("variant", "kg_fraction", "seed", "em_hop1", "em_context",
               "em_hop2", "n_hop1", "n_context", "n_hop2", "final_L", "final_Sim")


def exact_match(prediction: str, gold: str) -> int:
    """1 iff equal after lowercasing, trimming and collapsing whitespace."""
    norm = lambda s: " ".join(s.lower().split())
    return int(norm(prediction) == norm(gold))


@dataclass
class MetricsReport:
    variant: str
    kg_fraction: float
    seed: int
    em_hop1: float
    em_context: float
    em_hop2: float
    n_hop1: int
    n_context: int
    n_hop2: int
    final_L: float
    final_Sim: float


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce an experiment bit-exactly."""

    kg_spec: SyntheticKGSpec = field(default_factory=SyntheticKGSpec)
    per_category: dict = field(default_factory=lambda: {"hop1": 130, "context": 130,
                                                        "hop2": 220})
    qa_seed: int = 0
    split_ratios: tuple[float, float] = (0.67, 0.33)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=1))
    transe: TransEConfig = field(default_factory=TransEConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(max_steps=300))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(max_steps=800))
    loss: LossSpec = field(default_factory=LossSpec)
    decode_steps: int = 4


def build_world(exp: ExperimentConfig) -> tuple[KnowledgeGraph, list[str], list[QAExample]]:
    kg, corpus = gen_synthetic_kg(exp.kg_spec)
    dataset = gen_qa(kg, exp.per_category, exp.qa_seed)
    return kg, corpus, dataset


def build_vocabulary(corpus: Sequence[str], dataset: Sequence[QAExample]) -> Vocabulary:
    texts = list(corpus) + [ex.question for ex in dataset] + [ex.answer for ex in dataset]
    return build_vocab(texts, min_count=1)


def evaluate_split(params: ModelParams, vocab: Vocabulary, kg: KnowledgeGraph,
                   emb: EmbeddingTable, examples: Sequence[QAExample],
                   variant: str, decode_steps: int = 4) -> dict[str, tuple[int, int]]:
    """Greedy-decode every example; returns {category: (matches, count)}."""
    prepared = prepare_examples(examples, kg, vocab, variant)
    stats = {c: [0, 0] for c in CATEGORIES}
    for ex, prep in zip(examples, prepared):
        enc = build_augmented_input(prep.aug, emb, params)
        pred = vocab.decode(greedy_decode(params, enc, decode_steps))
        stats[ex.category][0] += exact_match(pred, ex.answer)
        stats[ex.category][1] += 1
    return {c: (m, n) for c, (m, n) in stats.items()}


def _report_from(variant: str, fraction: float, seed: int,
                 stats: dict[str, tuple[int, int]],
                 trace: list[tuple[int, float, float, float]]) -> MetricsReport:
    def em(cat):
        m, n = stats[cat]
        return m / n if n else 0.0

    final_l, final_sim = (trace[-1][1], trace[-1][2]) if trace else (0.0, 0.0)
    return MetricsReport(
        variant=variant, kg_fraction=fraction, seed=seed,
        em_hop1=em("hop1"), em_context=em("context"), em_hop2=em("hop2"),
        n_hop1=stats["hop1"][1], n_context=stats["context"][1],
        n_hop2=stats["hop2"][1], final_L=final_l, final_Sim=final_sim)


def run_ablation(kg: KnowledgeGraph, corpus: Sequence[str],
                 dataset: Sequence[QAExample], exp: ExperimentConfig,
                 seeds: Sequence[int]) -> list[MetricsReport]:
    """For each seed and variant: shared pretrain/split/embeddings, then
    fine-tune and evaluate on the held-out split."""
    if not seeds:
        raise ValueError("need at least one seed")
    vocab = build_vocabulary(corpus, dataset)
    model_cfg = replace(exp.model, vocab_size=len(vocab))
    corpus_ids = [vocab.encode(s) for s in corpus]
    reports: list[MetricsReport] = []
    for seed in seeds:
        train_set, test_set = split(dataset, exp.split_ratios, seed)
        emb0, _ = train_kg_embeddings(kg, replace(exp.transe, seed=seed),
                                      model_cfg.d_kg)
        params0 = ModelParams.init(model_cfg, seed)
        params0, _ = pretrain(params0, corpus_ids, replace(exp.pretrain, seed=seed))
        for variant in VARIANTS:
            params = params0.copy()
            params, emb_v, trace = finetune(
                params, train_set, kg, emb0.copy(), exp.loss, variant,
                replace(exp.finetune, seed=seed), vocab)
            stats = evaluate_split(params, vocab, kg, emb_v, test_set, variant,
                                   exp.decode_steps)
            reports.append(_report_from(variant, 1.0, seed, stats, trace))
    return reports


def run_scale_sweep(kg: KnowledgeGraph, corpus: Sequence[str],
                    dataset: Sequence[QAExample], exp: ExperimentConfig,
                    fractions: Sequence[float],
                    seeds: Sequence[int]) -> list[MetricsReport]:
    """Re-train embeddings per KG subgraph and fine-tune variant ``both``.

    The test set is fixed across fractions; questions whose entities fall
    outside a subgraph simply lack their KG rows.
    """
    if not fractions or list(fractions) != sorted(fractions):
        raise InvalidFractionError("fractions must be nonempty ascending")
    for f in fractions:
        if not (0.0 < f <= 1.0):
            raise InvalidFractionError(f"fraction {f} outside (0, 1]")
    vocab = build_vocabulary(corpus, dataset)
    model_cfg = replace(exp.model, vocab_size=len(vocab))
    corpus_ids = [vocab.encode(s) for s in corpus]
    reports: list[MetricsReport] = []
    for seed in seeds:
        train_set, test_set = split(dataset, exp.split_ratios, seed)
        params0 = ModelParams.init(model_cfg, seed)
        params0, _ = pretrain(params0, corpus_ids, replace(exp.pretrain, seed=seed))
        for fraction in fractions:
            sub = subgraph_fraction(kg, fraction, seed)
            emb_f, _ = train_kg_embeddings(sub, replace(exp.transe, seed=seed),
                                           model_cfg.d_kg)
            params = params0.copy()
            params, emb_v, trace = finetune(
                params, train_set, sub, emb_f, exp.loss, "both",
                replace(exp.finetune, seed=seed), vocab)
            stats = evaluate_split(params, vocab, sub, emb_v, test_set, "both",
                                   exp.decode_steps)
            reports.append(_report_from("both", fraction, seed, stats, trace))
    return reports


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def emit_report(reports: Sequence[MetricsReport], format: str, path) -> None:
    """CSV with the fixed column schema, or markdown tables with medians."""
    if not reports:
        raise ValueError("no reports to emit")
    if format == "csv":
        lines = [",".join(CSV_COLUMNS)]
        for r in reports:
            lines.append(",".join([
                r.variant, _fmt(r.kg_fraction), str(r.seed),
                _fmt(r.em_hop1), _fmt(r.em_context), _fmt(r.em_hop2),
                str(r.n_hop1), str(r.n_context), str(r.n_hop2),
                _fmt(r.final_L), _fmt(r.final_Sim)]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    elif format == "markdown":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(render_markdown(reports))
    else:
        raise ValueError(f"unknown report format {format!r}")


def parse_report_csv(path) -> list[MetricsReport]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ValueError("bad metrics CSV header")
    out = []
    for ln in lines[1:]:
        v = ln.split(",")
        out.append(MetricsReport(
            variant=v[0], kg_fraction=float(v[1]), seed=int(v[2]),
            em_hop1=float(v[3]), em_context=float(v[4]), em_hop2=float(v[5]),
            n_hop1=int(v[6]), n_context=int(v[7]), n_hop2=int(v[8]),
            final_L=float(v[9]), final_Sim=float(v[10])))
    return out


def _median(values: Sequence[float]) -> float:
    return float(statistics.median(values))


def render_markdown(reports: Sequence[MetricsReport]) -> str:
    """One table per experiment axis, with per-group medians across seeds."""
    lines: list[str] = []
    by_variant: dict[str, list[MetricsReport]] = {}
    sweep: dict[float, list[MetricsReport]] = {}
    for r in reports:
        if r.kg_fraction == 1.0:
            by_variant.setdefault(r.variant, []).append(r)
        if r.variant == "both":
            sweep.setdefault(r.kg_fraction, []).append(r)
    variants_present = [v for v in VARIANTS if v in by_variant]
    if len(variants_present) > 1:
        lines.append("## Ablation (KG input variants)")
        lines.append("")
        lines.append("| variant | median em_hop1 | median em_context | median em_hop2 | seeds |")
        lines.append("|---|---|---|---|---|")
        for v in variants_present:
            rows = by_variant[v]
            lines.append(f"| {v} | {_median([r.em_hop1 for r in rows]):.4f} "
                         f"| {_median([r.em_context for r in rows]):.4f} "
                         f"| {_median([r.em_hop2 for r in rows]):.4f} "
                         f"| {len(rows)} |")
        lines.append("")
    if len(sweep) > 1:
        lines.append("## KG scale sweep (variant both)")
        lines.append("")
        lines.append("| kg_fraction | median em_hop1 | median em_context | median em_hop2 | seeds |")
        lines.append("|---|---|---|---|---|")
        for f in sorted(sweep):
            rows = sweep[f]
            lines.append(f"| {f:.4f} | {_median([r.em_hop1 for r in rows]):.4f} "
                         f"| {_median([r.em_context for r in rows]):.4f} "
                         f"| {_median([r.em_hop2 for r in rows]):.4f} "
                         f"| {len(rows)} |")
        lines.append("")
    lines.append("## All runs")
    lines.append("")
    lines.append("| " + " | ".join(CSV_COLUMNS) + " |")
    lines.append("|" + "---|" * len(CSV_COLUMNS))
    for r in reports:
        lines.append("| " + " | ".join([
            r.variant, f"{r.kg_fraction:.4f}", str(r.seed),
            f"{r.em_hop1:.4f}", f"{r.em_context:.4f}", f"{r.em_hop2:.4f}",
            str(r.n_hop1), str(r.n_context), str(r.n_hop2),
            f"{r.final_L:.4f}", f"{r.final_Sim:.4f}"]) + " |")
    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------

def experiment_to_jsonable(exp: ExperimentConfig) -> dict:
    d = dataclasses.asdict(exp)
    d["kg_spec"]["occupations"] = list(d["kg_spec"]["occupations"])
    d["split_ratios"] = list(d["split_ratios"])
    return d


def experiment_from_jsonable(d: dict) -> ExperimentConfig:
    kg_spec = d["kg_spec"].copy()
    kg_spec["occupations"] = tuple(kg_spec["occupations"])
    return ExperimentConfig(
        kg_spec=SyntheticKGSpec(**kg_spec),
        per_category=dict(d["per_category"]),
        qa_seed=d["qa_seed"],
        split_ratios=tuple(d["split_ratios"]),
        model=ModelConfig(**d["model"]),
        transe=TransEConfig(**d["transe"]),
        pretrain=TrainConfig(**d["pretrain"]),
        finetune=TrainConfig(**d["finetune"]),
        loss=LossSpec(**d["loss"]),
        decode_steps=d.get("decode_steps", 4))


def make_manifest(experiment: str, exp: ExperimentConfig, seeds: Sequence[int],
                  fractions: Optional[Sequence[float]] = None,
                  argv: Optional[Sequence[str]] = None) -> dict:
    return {
        "experiment": experiment,
        "config": experiment_to_jsonable(exp),
        "seeds": list(seeds),
        "fractions": list(fractions) if fractions is not None else None,
        "tool_version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "argv": list(argv) if argv is not None else None,
    }


def run_from_manifest(manifest: dict) -> list[MetricsReport]:
    """Re-run the experiment a manifest describes; sequential mode
    reproduces every metrics row bit-exactly on the same kernel backend."""
    exp = experiment_from_jsonable(manifest["config"])
    kg, corpus, dataset = build_world(exp)
    if manifest["experiment"] == "ablation":
        return run_ablation(kg, corpus, dataset, exp, manifest["seeds"])
    if manifest["experiment"] == "scale-sweep":
        return run_scale_sweep(kg, corpus, dataset, exp,
                               manifest["fractions"], manifest["seeds"])
    raise ValueError(f"unknown experiment kind {manifest['experiment']!r}")


def save_manifest(manifest: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
