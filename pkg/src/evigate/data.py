"""Core dataset record: a bag of frame features with multi-rater labels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SPLITS = ("train", "val", "test", "unseen")
N_CLASSES = 4


@dataclass
class FeatureBag:
    """One video: an (N, D) frame-feature matrix plus its rater labels.

    ``adjudicator_label`` is present only when local and central readers
    disagreed; ``final_label`` is then the median of the three scores,
    otherwise the shared score.
    """

    bag_id: int
    frames: np.ndarray  # (N, D) float32
    local_label: int
    central_label: int
    adjudicator_label: int | None
    final_label: int
    split: str
    true_class: int = -1
    difficulty: float = 0.0

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ConfigError(f"bag {self.bag_id}: frames must be (N>=1, D)")
        self.validate_labels()

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def label(self, source: str) -> int:
        if source == "local":
            return self.local_label
        if source == "central":
            return self.central_label
        if source == "final":
            return self.final_label
        raise ConfigError(f"unknown label source {source!r}")

    def validate_labels(self) -> None:
        scores = [self.local_label, self.central_label, self.final_label]
        if self.adjudicator_label is not None:
            scores.append(self.adjudicator_label)
        for s in scores:
            if not 0 <= int(s) <= N_CLASSES - 1:
                raise ConfigError(f"bag {self.bag_id}: label {s} out of range")
        if self.split not in SPLITS:
            raise ConfigError(f"bag {self.bag_id}: unknown split {self.split!r}")
        if self.local_label == self.central_label:
            if self.adjudicator_label is not None:
                raise ConfigError(
                    f"bag {self.bag_id}: adjudicator present despite agreement")
            if self.final_label != self.local_label:
                raise ConfigError(
                    f"bag {self.bag_id}: final label breaks the agreement rule")
        else:
            if self.adjudicator_label is None:
                raise ConfigError(
                    f"bag {self.bag_id}: disagreement without adjudicator")
            med = int(np.median([self.local_label, self.central_label,
                                 self.adjudicator_label]))
            if self.final_label != med:
                raise ConfigError(
                    f"bag {self.bag_id}: final label is not the median")
