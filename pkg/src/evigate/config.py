"""Experiment configuration: JSON schema, strict validation and hashing.

A config file is a single JSON document; unknown keys are rejected at every
level and missing keys fall back to the defaults below.  The configuration
hash covers the fully-resolved document minus the volatile ``seed`` and
``output_dir`` fields, and is embedded in every artifact so stale mixes of
files are caught on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .data import N_CLASSES
from .errors import ConfigError
from .evidential import EdlLossConfig
from .expert import TrainConfig
from .gate import GateLossConfig
from .metrics import DEFAULT_BINS, DEFAULT_GRID, DEFAULT_MIN_RETENTION
from .simdata import GeneratorConfig, RaterProfile

METHODS = ("softmax", "mc_dropout", "ensemble", "edl", "naive", "gated")
RATER_ROLES = ("local", "central", "adjudicator",
               "unseen_local", "unseen_central", "unseen_adjudicator")


@dataclass
class ExpertSpec:
    label_source: str = "central"
    hidden_dim: int = 64
    attention_dim: int = 32
    dropout: float = 0.1


@dataclass
class BaselineConfig:
    ensemble_size: int = 4
    mc_passes: int = 40
    hidden_dim: int = 64
    attention_dim: int = 32
    dropout: float = 0.25
    label_source: str = "central"


@dataclass
class MetricsConfig:
    ece_bins: int = DEFAULT_BINS
    threshold_grid: tuple[float, ...] = DEFAULT_GRID
    min_retention: float = DEFAULT_MIN_RETENTION


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    raters: dict[str, RaterProfile] = field(default_factory=dict)
    experts: list[ExpertSpec] = field(default_factory=list)
    expert_feature_dim: int = 32
    expert_training: TrainConfig = field(default_factory=TrainConfig)
    edl_loss: EdlLossConfig = field(default_factory=EdlLossConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    gate_shared_dim: int = 32
    gate_dropout: float = 0.25
    gate_loss: GateLossConfig = field(default_factory=GateLossConfig)
    gate_training: TrainConfig = field(
        default_factory=lambda: TrainConfig(weight_decay=0.0,
                                            weighted_sampling=False))
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


def default_raters() -> dict[str, RaterProfile]:
    return {
        "local": RaterProfile(0.10, 0.25, "local"),
        "central": RaterProfile(0.00, 0.25, "central"),
        "adjudicator": RaterProfile(0.00, 0.25, "adjudicator"),
        "unseen_local": RaterProfile(-0.10, 0.30, "local"),
        "unseen_central": RaterProfile(0.10, 0.30, "central"),
        "unseen_adjudicator": RaterProfile(0.00, 0.28, "adjudicator"),
    }


def default_experts() -> list[ExpertSpec]:
    # Four central-label experts and two local-label experts, diversified by
    # width and dropout; seeds differ per slot.
    return [
        ExpertSpec("central", 64, 32, 0.10),
        ExpertSpec("central", 64, 32, 0.25),
        ExpertSpec("central", 96, 48, 0.10),
        ExpertSpec("central", 96, 48, 0.25),
        ExpertSpec("local", 64, 32, 0.25),
        ExpertSpec("local", 96, 48, 0.10),
    ]


def default_config() -> ExperimentConfig:
    return ExperimentConfig(raters=default_raters(), experts=default_experts())


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _check_keys(d: dict, allowed: set[str], ctx: str) -> None:
    _require(isinstance(d, dict), f"{ctx}: expected an object")
    unknown = set(d) - allowed
    _require(not unknown, f"{ctx}: unknown keys {sorted(unknown)}")


def _parse_generator(d: dict, ctx: str) -> GeneratorConfig:
    base = GeneratorConfig()
    _check_keys(d, {"class_prior", "n_videos", "frames_range", "feature_dim",
                    "class_separation", "difficulty_sd",
                    "noninformative_frame_rate", "unseen_feature_shift"}, ctx)
    n_videos = dict(base.n_videos)
    if "n_videos" in d:
        _check_keys(d["n_videos"], {"train", "val", "test", "unseen"},
                    f"{ctx}.n_videos")
        n_videos.update({k: int(v) for k, v in d["n_videos"].items()})
    return GeneratorConfig(
        class_prior=tuple(d.get("class_prior", base.class_prior)),
        n_videos=n_videos,
        frames_range=tuple(d.get("frames_range", base.frames_range)),
        feature_dim=int(d.get("feature_dim", base.feature_dim)),
        class_separation=float(d.get("class_separation", base.class_separation)),
        difficulty_sd=float(d.get("difficulty_sd", base.difficulty_sd)),
        noninformative_frame_rate=float(
            d.get("noninformative_frame_rate", base.noninformative_frame_rate)),
        unseen_feature_shift=float(
            d.get("unseen_feature_shift", base.unseen_feature_shift)),
        seed=0,
    )


def _parse_raters(d: dict, ctx: str) -> dict[str, RaterProfile]:
    raters = default_raters()
    _check_keys(d, set(RATER_ROLES), ctx)
    for role, spec in d.items():
        _check_keys(spec, {"bias", "noise_sd"}, f"{ctx}.{role}")
        raters[role] = RaterProfile(
            bias=float(spec.get("bias", raters[role].bias)),
            noise_sd=float(spec.get("noise_sd", raters[role].noise_sd)),
            role=role.removeprefix("unseen_"),
        )
    return raters


def _parse_experts(items: list, ctx: str) -> list[ExpertSpec]:
    _require(isinstance(items, list) and len(items) >= 2,
             f"{ctx}: need a list of at least 2 expert specs")
    out = []
    for i, spec in enumerate(items):
        _check_keys(spec, {"label_source", "hidden_dim", "attention_dim",
                           "dropout"}, f"{ctx}[{i}]")
        out.append(ExpertSpec(
            label_source=str(spec.get("label_source", "central")),
            hidden_dim=int(spec.get("hidden_dim", 64)),
            attention_dim=int(spec.get("attention_dim", 32)),
            dropout=float(spec.get("dropout", 0.1)),
        ))
        _require(out[-1].label_source in ("local", "central"),
                 f"{ctx}[{i}]: label_source must be local or central")
    return out


def _parse_training(d: dict, base: TrainConfig, ctx: str) -> TrainConfig:
    _check_keys(d, {"epochs", "learning_rate", "weight_decay", "batch_size",
                    "weighted_sampling"}, ctx)
    return TrainConfig(
        epochs=int(d.get("epochs", base.epochs)),
        learning_rate=float(d.get("learning_rate", base.learning_rate)),
        weight_decay=float(d.get("weight_decay", base.weight_decay)),
        batch_size=int(d.get("batch_size", base.batch_size)),
        weighted_sampling=bool(d.get("weighted_sampling", base.weighted_sampling)),
    )


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a JSON document into an ExperimentConfig (strict keys)."""
    _check_keys(doc, {"seed", "output_dir", "generator", "raters", "experts",
                      "expert_feature_dim", "expert_training", "edl_loss",
                      "baselines", "gate", "gate_loss", "gate_training",
                      "metrics"}, "config")
    cfg = default_config()
    seed = int(doc.get("seed", 0))
    _require(seed >= 0, "config.seed must be >= 0")
    cfg.seed = seed
    cfg.output_dir = str(doc.get("output_dir", cfg.output_dir))
    if "generator" in doc:
        cfg.generator = _parse_generator(doc["generator"], "config.generator")
    if "raters" in doc:
        cfg.raters = _parse_raters(doc["raters"], "config.raters")
    if "experts" in doc:
        cfg.experts = _parse_experts(doc["experts"], "config.experts")
    cfg.expert_feature_dim = int(doc.get("expert_feature_dim",
                                         cfg.expert_feature_dim))
    _require(cfg.expert_feature_dim >= 1, "expert_feature_dim must be >= 1")
    if "expert_training" in doc:
        cfg.expert_training = _parse_training(doc["expert_training"],
                                              cfg.expert_training,
                                              "config.expert_training")
    if "edl_loss" in doc:
        _check_keys(doc["edl_loss"], {"annealing_epochs",
                                      "kl_evidence_adjustment"},
                    "config.edl_loss")
        cfg.edl_loss = EdlLossConfig(
            annealing_epochs=int(doc["edl_loss"].get("annealing_epochs", 10)),
            kl_evidence_adjustment=bool(
                doc["edl_loss"].get("kl_evidence_adjustment", True)),
        )
    if "baselines" in doc:
        _check_keys(doc["baselines"], {"ensemble_size", "mc_passes",
                                       "hidden_dim", "attention_dim",
                                       "dropout", "label_source"},
                    "config.baselines")
        b = BaselineConfig()
        cfg.baselines = BaselineConfig(
            ensemble_size=int(doc["baselines"].get("ensemble_size", b.ensemble_size)),
            mc_passes=int(doc["baselines"].get("mc_passes", b.mc_passes)),
            hidden_dim=int(doc["baselines"].get("hidden_dim", b.hidden_dim)),
            attention_dim=int(doc["baselines"].get("attention_dim",
                                                   b.attention_dim)),
            dropout=float(doc["baselines"].get("dropout", b.dropout)),
            label_source=str(doc["baselines"].get("label_source",
                                                  b.label_source)),
        )
        _require(cfg.baselines.ensemble_size >= 2,
                 "config.baselines.ensemble_size must be >= 2")
        _require(cfg.baselines.mc_passes >= 1,
                 "config.baselines.mc_passes must be >= 1")
    if "gate" in doc:
        _check_keys(doc["gate"], {"shared_dim", "dropout"}, "config.gate")
        cfg.gate_shared_dim = int(doc["gate"].get("shared_dim",
                                                  cfg.gate_shared_dim))
        cfg.gate_dropout = float(doc["gate"].get("dropout", cfg.gate_dropout))
    if "gate_loss" in doc:
        _check_keys(doc["gate_loss"], {"beta1", "beta2", "gamma1", "gamma2"},
                    "config.gate_loss")
        g = doc["gate_loss"]
        cfg.gate_loss = GateLossConfig(
            beta1=float(g.get("beta1", 1.0)), beta2=float(g.get("beta2", 5.0)),
            gamma1=float(g.get("gamma1", 1.0)),
            gamma2=float(g.get("gamma2", 5.0)))
    if "gate_training" in doc:
        cfg.gate_training = _parse_training(doc["gate_training"],
                                            cfg.gate_training,
                                            "config.gate_training")
    if "metrics" in doc:
        _check_keys(doc["metrics"], {"ece_bins", "threshold_grid",
                                     "min_retention"}, "config.metrics")
        m = doc["metrics"]
        cfg.metrics = MetricsConfig(
            ece_bins=int(m.get("ece_bins", DEFAULT_BINS)),
            threshold_grid=tuple(float(q) for q in
                                 m.get("threshold_grid", DEFAULT_GRID)),
            min_retention=float(m.get("min_retention", DEFAULT_MIN_RETENTION)),
        )
        _require(cfg.metrics.ece_bins >= 1, "config.metrics.ece_bins must be >= 1")
        _require(0.0 <= cfg.metrics.min_retention <= 1.0,
                 "config.metrics.min_retention must be in [0, 1]")
    _require(cfg.expert_training.epochs >= 1,
             "config.expert_training.epochs must be >= 1")
    _require(cfg.gate_training.epochs >= 1,
             "config.gate_training.epochs must be >= 1")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return parse_config(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """Fully-resolved plain dict mirroring the JSON schema."""
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "generator": {
            "class_prior": list(cfg.generator.class_prior),
            "n_videos": {k: int(cfg.generator.n_videos.get(k, 0))
                         for k in ("train", "val", "test", "unseen")},
            "frames_range": list(cfg.generator.frames_range),
            "feature_dim": cfg.generator.feature_dim,
            "class_separation": cfg.generator.class_separation,
            "difficulty_sd": cfg.generator.difficulty_sd,
            "noninformative_frame_rate": cfg.generator.noninformative_frame_rate,
            "unseen_feature_shift": cfg.generator.unseen_feature_shift,
        },
        "raters": {role: {"bias": rp.bias, "noise_sd": rp.noise_sd}
                   for role, rp in sorted(cfg.raters.items())},
        "experts": [asdict(e) for e in cfg.experts],
        "expert_feature_dim": cfg.expert_feature_dim,
        "expert_training": asdict(cfg.expert_training),
        "edl_loss": asdict(cfg.edl_loss),
        "baselines": asdict(cfg.baselines),
        "gate": {"shared_dim": cfg.gate_shared_dim, "dropout": cfg.gate_dropout},
        "gate_loss": asdict(cfg.gate_loss),
        "gate_training": asdict(cfg.gate_training),
        "metrics": {
            "ece_bins": cfg.metrics.ece_bins,
            "threshold_grid": list(cfg.metrics.threshold_grid),
            "min_retention": cfg.metrics.min_retention,
        },
    }


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 over the canonical config JSON, excluding seed/output_dir."""
    doc = config_to_dict(cfg)
    doc.pop("seed")
    doc.pop("output_dir")
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def derive_seed(base: int, *parts) -> int:
    """Stable component seed from the experiment seed and a role path."""
    text = ":".join([str(base)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8],
                          "big") & (2**63 - 1)
