"""Synthetic multi-rater trial generator.

Each video gets a true severity class on an ordinal axis embedded in feature
space, a per-video difficulty that inflates both feature noise and rater
noise, and scores from a local reader, a central reader and (on
disagreement) an adjudicator; the final label is the median of the three.
Everything is a pure function of (config, seed): per-bag streams come from a
counter-based generator keyed by (seed, bag id), so generation order and
parallelism cannot change the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .data import N_CLASSES, SPLITS, FeatureBag
from .errors import ConfigError

_FRAME_STREAM = 0
_LABEL_STREAM = 1
_AXES_STREAM = 2


@dataclass
class RaterProfile:
    """Systematic bias and noise level of one reader role."""

    bias: float
    noise_sd: float
    role: str = "central"

    def __post_init__(self):
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be positive")


@dataclass
class GeneratorConfig:
    class_prior: tuple[float, ...] = (0.35, 0.25, 0.20, 0.20)
    n_videos: Mapping[str, int] = field(
        default_factory=lambda: {"train": 2000, "val": 500, "test": 500,
                                 "unseen": 500})
    frames_range: tuple[int, int] = (16, 64)
    feature_dim: int = 32
    class_separation: float = 1.0
    difficulty_sd: float = 0.6
    noninformative_frame_rate: float = 0.2
    unseen_feature_shift: float = 0.3
    seed: int = 0

    def __post_init__(self):
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if prior.shape != (N_CLASSES,) or np.any(prior < 0) \
                or abs(prior.sum() - 1.0) > 1e-9:
            raise ConfigError("class_prior must be a 4-class simplex point")
        lo, hi = self.frames_range
        if not (1 <= lo <= hi):
            raise ConfigError("frames_range must satisfy 1 <= N_min <= N_max")
        if not 0.0 <= self.noninformative_frame_rate < 1.0:
            raise ConfigError("noninformative_frame_rate must be in [0, 1)")
        if self.class_separation <= 0 or self.difficulty_sd <= 0:
            raise ConfigError("class_separation and difficulty_sd must be > 0")
        for split in SPLITS:
            if self.n_videos.get(split, 0) < 0:
                raise ConfigError("n_videos must be non-negative")


def _stream_rng(seed: int, bag_id: int, stream: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(bag_id * 4 + stream)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _directions(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Orthonormal triple: severity axis, background offset, covariate-shift
    # direction, fixed per (seed, feature_dim).
    rng = _stream_rng(cfg.seed, 0, _AXES_STREAM)
    basis = rng.normal(size=(3, cfg.feature_dim))
    q, _ = np.linalg.qr(basis.T)
    return q[:, 0], q[:, 1], q[:, 2]


def generate_video(true_class: int, difficulty: float, cfg: GeneratorConfig,
                   bag_id: int, mean_shift: np.ndarray | None = None) -> np.ndarray:
    """Frame-feature matrix for one video, deterministic per (seed, bag_id).

    Informative frames sit at the class position on the severity axis with
    noise scaled by (1 + difficulty); a ``noninformative_frame_rate``
    fraction comes from a shared off-axis background distribution.
    """
    if not 0 <= true_class <= N_CLASSES - 1:
        raise ConfigError(f"true_class {true_class} out of range")
    axis, background, _ = _directions(cfg)
    rng = _stream_rng(cfg.seed, bag_id, _FRAME_STREAM)
    lo, hi = cfg.frames_range
    n = int(rng.integers(lo, hi + 1))
    informative = rng.random(n) >= cfg.noninformative_frame_rate
    noise = rng.normal(size=(n, cfg.feature_dim))
    class_mean = (true_class - (N_CLASSES - 1) / 2.0) * cfg.class_separation * axis
    bg_mean = 1.5 * cfg.class_separation * background
    means = np.where(informative[:, None], class_mean, bg_mean)
    scale = np.where(informative[:, None], 1.0 + difficulty, 1.0)
    frames = means + scale * noise
    if mean_shift is not None:
        frames = frames + mean_shift
    return frames.astype(np.float32)


def rate(true_class: int, difficulty: float, rater: RaterProfile,
         rng: np.random.Generator) -> int:
    """One reader's ordinal score: round-and-clamp of a noisy shift."""
    raw = true_class + rater.bias + rng.normal(0.0, rater.noise_sd * (1.0 + difficulty))
    return int(np.clip(np.rint(raw), 0, N_CLASSES - 1))


def trial_label(local: int, central: int,
                adjudicate: Callable[[], int]) -> tuple[int, bool]:
    """Final trial score: shared value on agreement, else median of three.

    The adjudicator score is sampled lazily, only on disagreement.
    """
    if local == central:
        return int(local), False
    third = int(adjudicate())
    return int(np.median([local, central, third])), True


def generate_dataset(cfg: GeneratorConfig,
                     raters: Mapping[str, RaterProfile]) -> dict[str, list[FeatureBag]]:
    """All four splits with per-bag rater labels and final trial labels.

    The unseen split uses the ``unseen_local`` / ``unseen_central`` /
    ``unseen_adjudicator`` profiles and shifts every frame mean by
    ``unseen_feature_shift`` along a fixed off-axis direction, emulating a
    prospective trial.
    """
    for role in ("local", "central", "adjudicator"):
        if role not in raters:
            raise ConfigError(f"missing rater profile {role!r}")
        if f"unseen_{role}" not in raters:
            raise ConfigError(f"missing rater profile 'unseen_{role}'")
    _, _, shift_dir = _directions(cfg)
    prior = np.asarray(cfg.class_prior, dtype=np.float64)
    dataset: dict[str, list[FeatureBag]] = {}
    bag_id = 0
    for split in SPLITS:
        count = int(cfg.n_videos.get(split, 0))
        prefix = "unseen_" if split == "unseen" else ""
        shift = cfg.unseen_feature_shift * shift_dir if split == "unseen" else None
        bags = []
        for _ in range(count):
            rng = _stream_rng(cfg.seed, bag_id, _LABEL_STREAM)
            true_class = int(rng.choice(N_CLASSES, p=prior))
            difficulty = float(abs(rng.normal(0.0, cfg.difficulty_sd)))
            frames = generate_video(true_class, difficulty, cfg, bag_id, shift)
            local = rate(true_class, difficulty, raters[prefix + "local"], rng)
            central = rate(true_class, difficulty, raters[prefix + "central"], rng)
            sampled: list[int] = []

            def adjudicate() -> int:
                sampled.append(rate(true_class, difficulty,
                                    raters[prefix + "adjudicator"], rng))
                return sampled[-1]

            final, adjudicated = trial_label(local, central, adjudicate)
            bags.append(FeatureBag(
                bag_id=bag_id,
                frames=frames,
                local_label=local,
                central_label=central,
                adjudicator_label=sampled[0] if adjudicated else None,
                final_label=final,
                split=split,
                true_class=true_class,
                difficulty=difficulty,
            ))
            bag_id += 1
        dataset[split] = bags
    return dataset
