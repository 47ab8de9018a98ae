"""End-to-end experiment stages shared by the CLI and the test harness.

Every stage is a pure function of (config, artifacts on disk): rerunning a
stage after deleting its outputs reproduces them bit-identically, and the
multi-seed benchmark simply runs the per-seed pipeline in per-seed output
directories before aggregating their result tables.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import (ExperimentConfig, METHODS, config_hash, config_to_dict,
                     derive_seed, parse_config)
from .data import FeatureBag, N_CLASSES, SPLITS
from .errors import ConfigError
from .expert import (EVIDENTIAL, SOFTMAX, ExpertModel, ensemble_predict,
                     init_expert, mc_dropout_predict, predict_bags,
                     train_expert)
from .gate import GateModel, gate_predict, init_gate, naive_fuse_arrays, train_gate
from .metrics import (StratificationRow, ece, fit_thresholds,
                      reliability_diagram, stratify, weighted_f1)
from .storage import (ArtifactError, atomic_write_text, load_checkpoint,
                      load_split, save_checkpoint, save_split)

EVAL_SPLITS = ("test", "unseen")
RESULTS_COLUMNS = ("method", "split", "seed", "weighted_f1", "ece",
                   "retention", "confident_f1", "uncertain_f1")


# ---------------------------------------------------------------------------
# model construction

def build_edl_experts(cfg: ExperimentConfig) -> list[ExpertModel]:
    experts = []
    for i, spec in enumerate(cfg.experts):
        experts.append(init_expert(
            label_source=spec.label_source,
            input_dim=cfg.generator.feature_dim,
            hidden_dim=spec.hidden_dim,
            attention_dim=spec.attention_dim,
            feature_dim=cfg.expert_feature_dim,
            head=EVIDENTIAL,
            dropout_rate=spec.dropout,
            seed=derive_seed(cfg.seed, "expert", i),
        ))
    return experts


def build_baselines(cfg: ExperimentConfig) -> list[ExpertModel]:
    b = cfg.baselines
    return [init_expert(
        label_source=b.label_source,
        input_dim=cfg.generator.feature_dim,
        hidden_dim=b.hidden_dim,
        attention_dim=b.attention_dim,
        feature_dim=cfg.expert_feature_dim,
        head=SOFTMAX,
        dropout_rate=b.dropout,
        seed=derive_seed(cfg.seed, "baseline", j),
    ) for j in range(b.ensemble_size)]


def build_gate(cfg: ExperimentConfig) -> GateModel:
    return init_gate(
        n_experts=len(cfg.experts),
        feature_dim=cfg.expert_feature_dim,
        shared_dim=cfg.gate_shared_dim,
        dropout_rate=cfg.gate_dropout,
        seed=derive_seed(cfg.seed, "gate"),
    )


# ---------------------------------------------------------------------------
# artifact paths

def split_path(outdir: Path, split: str) -> Path:
    return outdir / f"dataset_{split}.bin"


def expert_path(outdir: Path, i: int) -> Path:
    return outdir / "experts" / f"expert_{i:02d}.ckpt"


def baseline_path(outdir: Path, j: int) -> Path:
    return outdir / "experts" / f"baseline_{j:02d}.ckpt"


def gate_path(outdir: Path) -> Path:
    return outdir / "gate.ckpt"


# ---------------------------------------------------------------------------
# stages

def stage_generate(cfg: ExperimentConfig, outdir: Path) -> dict[str, list[FeatureBag]]:
    gen = replace(cfg.generator, seed=cfg.seed)
    from .simdata import generate_dataset

    dataset = generate_dataset(gen, cfg.raters)
    h = config_hash(cfg)
    for split in SPLITS:
        save_split(split_path(outdir, split), split, dataset[split], h)
    return dataset


def load_dataset(cfg: ExperimentConfig, outdir: Path,
                 allow_mismatch: bool = False) -> dict[str, list[FeatureBag]]:
    h = config_hash(cfg)
    return {split: load_split(split_path(outdir, split), h, allow_mismatch)
            for split in SPLITS}


def _expert_arch(model: ExpertModel) -> dict:
    return {
        "label_source": model.label_source,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "attention_dim": model.attention_dim,
        "feature_dim": model.feature_dim,
        "head": model.head,
        "dropout_rate": model.dropout_rate,
        "n_classes": model.n_classes,
    }


def _expert_from_checkpoint(doc: dict) -> ExpertModel:
    a = doc["arch"]
    return ExpertModel(
        label_source=a["label_source"], input_dim=a["input_dim"],
        hidden_dim=a["hidden_dim"], attention_dim=a["attention_dim"],
        feature_dim=a["feature_dim"], head=a["head"],
        dropout_rate=a["dropout_rate"], seed=doc["seed"],
        n_classes=a["n_classes"], params=doc["params"])


def _train_one_expert(cfg: ExperimentConfig, outdir: Path,
                      dataset: dict[str, list[FeatureBag]], kind: str,
                      index: int) -> list[tuple[str, int, float]]:
    """Train one model, save its checkpoint, return loss-curve rows."""
    h = config_hash(cfg)
    if kind == "expert":
        model = build_edl_experts(cfg)[index]
        model, curve = train_expert(model, dataset["train"],
                                    cfg.expert_training, loss="edl",
                                    edl_cfg=cfg.edl_loss)
        path, name = expert_path(outdir, index), f"expert_{index:02d}"
    else:
        model = build_baselines(cfg)[index]
        model, curve = train_expert(model, dataset["train"],
                                    cfg.expert_training, loss="cross_entropy")
        path, name = baseline_path(outdir, index), f"baseline_{index:02d}"
    save_checkpoint(path, "expert", _expert_arch(model), model.params,
                    model.seed, h)
    return [(name, epoch + 1, loss) for epoch, loss in enumerate(curve)]


def _train_job(args) -> list[tuple[str, int, float]]:
    cfg_doc, outdir, kind, index = args
    cfg = parse_config(cfg_doc)
    dataset = load_dataset(cfg, Path(outdir))
    return _train_one_expert(cfg, Path(outdir), dataset, kind, index)


def stage_train_experts(cfg: ExperimentConfig, outdir: Path,
                        dataset: dict[str, list[FeatureBag]] | None = None,
                        jobs: int = 1) -> None:
    """Train the K evidential experts plus the softmax baseline members."""
    tasks = [("expert", i) for i in range(len(cfg.experts))] \
        + [("baseline", j) for j in range(cfg.baselines.ensemble_size)]
    rows: list[tuple[str, int, float]] = []
    if jobs > 1:
        doc = config_to_dict(cfg)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk in pool.map(_train_job,
                                  [(doc, str(outdir), k, i) for k, i in tasks]):
                rows.extend(chunk)
    else:
        if dataset is None:
            dataset = load_dataset(cfg, outdir)
        for kind, index in tasks:
            rows.extend(_train_one_expert(cfg, outdir, dataset, kind, index))
    lines = [f"# evigate-loss-curves v1 config_hash={config_hash(cfg)} seed={cfg.seed}",
             "model,epoch,loss"]
    lines += [f"{name},{epoch},{loss:.6f}" for name, epoch, loss in rows]
    atomic_write_text(outdir / "loss_curves.csv", "\n".join(lines) + "\n")


def load_experts(cfg: ExperimentConfig, outdir: Path,
                 allow_mismatch: bool = False
                 ) -> tuple[list[ExpertModel], list[ExpertModel]]:
    h = config_hash(cfg)
    experts = [_expert_from_checkpoint(
        load_checkpoint(expert_path(outdir, i), "expert", h, allow_mismatch))
        for i in range(len(cfg.experts))]
    baselines = [_expert_from_checkpoint(
        load_checkpoint(baseline_path(outdir, j), "expert", h, allow_mismatch))
        for j in range(cfg.baselines.ensemble_size)]
    return experts, baselines


def stage_train_gate(cfg: ExperimentConfig, outdir: Path,
                     dataset: dict[str, list[FeatureBag]] | None = None,
                     experts: list[ExpertModel] | None = None) -> GateModel:
    if dataset is None:
        dataset = load_dataset(cfg, outdir)
    if experts is None:
        experts, _ = load_experts(cfg, outdir)
    gate = build_gate(cfg)
    gate, _ = train_gate(gate, experts, dataset["train"], cfg.gate_training,
                         cfg.gate_loss)
    arch = {"n_experts": gate.n_experts, "feature_dim": gate.feature_dim,
            "shared_dim": gate.shared_dim, "dropout_rate": gate.dropout_rate}
    save_checkpoint(gate_path(outdir), "gate", arch, gate.params, gate.seed,
                    config_hash(cfg))
    return gate


def load_gate(cfg: ExperimentConfig, outdir: Path,
              allow_mismatch: bool = False) -> GateModel:
    doc = load_checkpoint(gate_path(outdir), "gate", config_hash(cfg),
                          allow_mismatch)
    a = doc["arch"]
    return GateModel(n_experts=a["n_experts"], feature_dim=a["feature_dim"],
                     shared_dim=a["shared_dim"], dropout_rate=a["dropout_rate"],
                     seed=doc["seed"], params=doc["params"])


# ---------------------------------------------------------------------------
# method predictions

@dataclass
class MethodPredictions:
    probs: np.ndarray        # (B, C)
    uncertainty: np.ndarray  # (B,)

    @property
    def preds(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)


class PredictionCache:
    """Per-split expert/baseline outputs shared across evaluated methods."""

    def __init__(self, cfg: ExperimentConfig, dataset: dict[str, list[FeatureBag]],
                 experts: list[ExpertModel], baselines: list[ExpertModel],
                 gate: GateModel | None):
        self.cfg = cfg
        self.dataset = dataset
        self.experts = experts
        self.baselines = baselines
        self.gate = gate
        self._stacks: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._methods: dict[tuple[str, str], MethodPredictions] = {}

    def expert_stacks(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if split not in self._stacks:
            per = [predict_bags(m, self.dataset[split]) for m in self.experts]
            self._stacks[split] = (
                np.stack([p for p, _, _ in per], axis=1),
                np.stack([u for _, u, _ in per], axis=1),
                np.stack([g for _, _, g in per], axis=1),
            )
        return self._stacks[split]

    def predictions(self, method: str, split: str) -> MethodPredictions:
        key = (method, split)
        if key not in self._methods:
            self._methods[key] = self._compute(method, split)
        return self._methods[key]

    def _compute(self, method: str, split: str) -> MethodPredictions:
        bags = self.dataset[split]
        if method == "softmax":
            probs, unc, _ = predict_bags(self.baselines[0], bags)
            return MethodPredictions(probs, unc)
        if method == "mc_dropout":
            probs, unc = mc_dropout_predict(self.baselines[0], bags,
                                            self.cfg.baselines.mc_passes)
            return MethodPredictions(probs, unc)
        if method == "ensemble":
            probs, unc = ensemble_predict(self.baselines, bags)
            return MethodPredictions(probs, unc)
        if method == "edl":
            p, u, _ = self.expert_stacks(split)
            return MethodPredictions(p[:, 0], u[:, 0])
        if method == "naive":
            p, u, _ = self.expert_stacks(split)
            probs, unc = naive_fuse_arrays(p, u)
            return MethodPredictions(probs, unc)
        if method == "gated":
            if self.gate is None:
                raise ConfigError("gated method requires a trained gate")
            p, u, g = self.expert_stacks(split)
            probs, unc, _, _, _ = gate_predict(self.gate, p, u, g)
            return MethodPredictions(probs, unc)
        raise ConfigError(f"unknown method {method!r}")


def normalize_methods(methods) -> list[str]:
    if not methods:
        return list(METHODS)
    bad = set(methods) - set(METHODS)
    if bad:
        raise ConfigError(f"unknown methods: {sorted(bad)}")
    return [m for m in METHODS if m in set(methods)]


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalRow:
    method: str
    split: str
    seed: int
    weighted_f1: float
    ece: float
    retention: float
    confident_f1: float
    uncertain_f1: float


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def evaluate_methods(cfg: ExperimentConfig, cache: PredictionCache,
                     methods: list[str]
                     ) -> tuple[list[EvalRow], list[dict], list[StratificationRow]]:
    rows, reliability, strat_rows = [], [], []
    for method in methods:
        val = cache.predictions(method, "val")
        val_labels = np.array([b.final_label for b in cache.dataset["val"]])
        thresholds = fit_thresholds(val.preds, val.uncertainty, val_labels,
                                    grid=cfg.metrics.threshold_grid,
                                    min_retention=cfg.metrics.min_retention)
        for split in EVAL_SPLITS:
            pred = cache.predictions(method, split)
            labels = np.array([b.final_label for b in cache.dataset[split]])
            correct = (pred.preds == labels).astype(np.float64)
            bins = reliability_diagram(pred.confidence, correct,
                                       cfg.metrics.ece_bins)
            srow = stratify(pred.preds, pred.uncertainty, labels, thresholds,
                            method=method, split=split)
            rows.append(EvalRow(
                method=method, split=split, seed=cfg.seed,
                weighted_f1=weighted_f1(pred.preds, labels),
                ece=ece(pred.confidence, correct, cfg.metrics.ece_bins),
                retention=srow.retention,
                confident_f1=srow.confident_f1,
                uncertain_f1=srow.uncertain_f1,
            ))
            reliability.append({
                "method": method, "split": split, "seed": cfg.seed,
                "bins": [{"lower": b.lower, "upper": b.upper, "count": b.count,
                          "accuracy": b.accuracy,
                          "mean_confidence": b.mean_confidence} for b in bins],
            })
            strat_rows.append(srow)
    return rows, reliability, strat_rows


def results_csv_text(cfg: ExperimentConfig, rows: list[EvalRow]) -> str:
    lines = [f"# evigate-results v1 config_hash={config_hash(cfg)} seed={cfg.seed}",
             ",".join(RESULTS_COLUMNS)]
    for r in rows:
        lines.append(",".join([
            r.method, r.split, str(r.seed), _fmt(r.weighted_f1), _fmt(r.ece),
            _fmt(r.retention), _fmt(r.confident_f1), _fmt(r.uncertain_f1)]))
    return "\n".join(lines) + "\n"


def stratification_csv_text(cfg: ExperimentConfig,
                            rows: list[StratificationRow], seed: int) -> str:
    lines = [f"# evigate-stratification v1 config_hash={config_hash(cfg)} seed={seed}",
             "method,split,seed," +
             ",".join(f"t_{c}" for c in range(N_CLASSES)) +
             ",confident_count,confident_f1,uncertain_count,uncertain_f1,retention"]
    for r in rows:
        lines.append(",".join(
            [r.method, r.split, str(seed)]
            + [_fmt(t) for t in r.thresholds]
            + [str(r.confident_count), _fmt(r.confident_f1),
               str(r.uncertain_count), _fmt(r.uncertain_f1), _fmt(r.retention)]))
    return "\n".join(lines) + "\n"


def stage_evaluate(cfg: ExperimentConfig, outdir: Path, methods=None,
                   dataset=None, experts=None, baselines=None, gate=None
                   ) -> list[EvalRow]:
    methods = normalize_methods(methods)
    if dataset is None:
        dataset = load_dataset(cfg, outdir)
    if experts is None or baselines is None:
        experts, baselines = load_experts(cfg, outdir)
    if gate is None and "gated" in methods:
        gate = load_gate(cfg, outdir)
    cache = PredictionCache(cfg, dataset, experts, baselines, gate)
    rows, reliability, strat_rows = evaluate_methods(cfg, cache, methods)
    atomic_write_text(outdir / "results.csv", results_csv_text(cfg, rows))
    reliability_doc = {
        "format": "evigate-reliability", "version": 1,
        "config_hash": config_hash(cfg), "seed": cfg.seed,
        "records": reliability,
    }
    atomic_write_text(outdir / "reliability.json",
                      json.dumps(reliability_doc, sort_keys=True, indent=1) + "\n")
    atomic_write_text(outdir / "stratification.csv",
                      stratification_csv_text(cfg, strat_rows, cfg.seed))
    return rows


def stage_stratify(cfg: ExperimentConfig, outdir: Path, methods=None
                   ) -> list[StratificationRow]:
    """Standalone stratification table for the uncertainty-aware methods."""
    methods = normalize_methods(methods or ["edl", "naive", "gated"])
    dataset = load_dataset(cfg, outdir)
    experts, baselines = load_experts(cfg, outdir)
    gate = load_gate(cfg, outdir) if "gated" in methods else None
    cache = PredictionCache(cfg, dataset, experts, baselines, gate)
    _, _, strat_rows = evaluate_methods(cfg, cache, methods)
    atomic_write_text(outdir / "stratification.csv",
                      stratification_csv_text(cfg, strat_rows, cfg.seed))
    return strat_rows


# ---------------------------------------------------------------------------
# benchmark

def run_seed_pipeline(cfg: ExperimentConfig, seed: int, outdir: Path,
                      methods=None) -> list[EvalRow]:
    """Generate, train and evaluate one seed in its own directory."""
    cfg = replace(cfg, seed=seed)
    dataset = stage_generate(cfg, outdir)
    stage_train_experts(cfg, outdir, dataset)
    experts, baselines = load_experts(cfg, outdir)
    gate = stage_train_gate(cfg, outdir, dataset, experts)
    return stage_evaluate(cfg, outdir, methods, dataset, experts, baselines, gate)


def _seed_job(args) -> None:
    cfg_doc, seed, outdir, methods = args
    run_seed_pipeline(parse_config(cfg_doc), seed, Path(outdir), methods)


def read_results_csv(path: Path) -> list[EvalRow]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("method,"):
            continue
        f = line.split(",")
        rows.append(EvalRow(f[0], f[1], int(f[2]), *(float(v) for v in f[3:])))
    return rows


def stage_benchmark(cfg: ExperimentConfig, seeds: list[int], outdir: Path,
                    methods=None, jobs: int = 1) -> list[EvalRow]:
    """Run the per-seed pipeline for every seed and aggregate the results."""
    if not seeds:
        raise ConfigError("benchmark needs at least one seed")
    methods = normalize_methods(methods)
    seed_dirs = {s: outdir / f"seed_{s}" for s in seeds}
    if jobs > 1:
        doc = config_to_dict(cfg)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_seed_job,
                          [(doc, s, str(seed_dirs[s]), methods) for s in seeds]))
    else:
        for s in seeds:
            run_seed_pipeline(cfg, s, seed_dirs[s], methods)
    all_rows: list[EvalRow] = []
    for s in seeds:
        all_rows.extend(read_results_csv(seed_dirs[s] / "results.csv"))

    h = config_hash(cfg)
    seeds_text = ";".join(str(s) for s in seeds)
    lines = [f"# evigate-benchmark-results v1 config_hash={h} seeds={seeds_text}",
             ",".join(RESULTS_COLUMNS)]
    for r in all_rows:
        lines.append(",".join([
            r.method, r.split, str(r.seed), _fmt(r.weighted_f1), _fmt(r.ece),
            _fmt(r.retention), _fmt(r.confident_f1), _fmt(r.uncertain_f1)]))
    atomic_write_text(outdir / "benchmark_results.csv", "\n".join(lines) + "\n")

    summary_lines = [
        f"# evigate-benchmark-summary v1 config_hash={h} seeds={seeds_text}",
        "method,split,metric,mean,sd,n_seeds"]
    metrics_cols = ("weighted_f1", "ece", "retention", "confident_f1",
                    "uncertain_f1")
    for method in methods:
        for split in EVAL_SPLITS:
            group = [r for r in all_rows
                     if r.method == method and r.split == split]
            for metric in metrics_cols:
                vals = np.array([getattr(r, metric) for r in group])
                vals = vals[~np.isnan(vals)]
                m = float(vals.mean()) if vals.size else float("nan")
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                summary_lines.append(
                    f"{method},{split},{metric},{_fmt(m)},{_fmt(sd)},{vals.size}")
    atomic_write_text(outdir / "benchmark_summary.csv",
                      "\n".join(summary_lines) + "\n")
    return all_rows
