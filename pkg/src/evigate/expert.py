"""Per-video classifier: gated-attention MIL pooling over frame features,
a dense penultimate layer exposed to the fusion gate, and either an
evidential head (softplus evidence) or a plain softmax head.

Bags have variable frame counts, so batched passes concatenate all frames
and pool per-bag via segment primitives; the public single-bag ``forward``
runs the same code path with one segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_CLASSES, FeatureBag
from .errors import ConfigError, ShapeError
from .evidential import EdlLossConfig, EvidentialOutput, edl_loss, evidential_from_logits
from .optim import AdamW

_INIT_STREAM = 0
_TRAIN_STREAM = 1
_MC_STREAM = 2

EVIDENTIAL = "evidential"
SOFTMAX = "softmax"


@dataclass
class ExpertModel:
    label_source: str
    input_dim: int
    hidden_dim: int
    attention_dim: int
    feature_dim: int
    head: str
    dropout_rate: float
    seed: int
    n_classes: int = N_CLASSES
    params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 16
    weighted_sampling: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def init_expert(label_source: str, input_dim: int, hidden_dim: int,
                attention_dim: int, feature_dim: int, head: str,
                dropout_rate: float, seed: int,
                n_classes: int = N_CLASSES) -> ExpertModel:
    """He/Xavier-initialised parameters, deterministic per seed."""
    if head not in (EVIDENTIAL, SOFTMAX):
        raise ConfigError(f"unknown head {head!r}")
    if label_source not in ("local", "central", "final"):
        raise ConfigError(f"unknown label source {label_source!r}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError("dropout_rate must be in [0, 1)")
    rng = _rng(seed, _INIT_STREAM)
    he = lambda fan_in, shape: rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    xavier = lambda fan_in, shape: rng.normal(0.0, np.sqrt(1.0 / fan_in), shape)
    params = {
        "enc_w": he(input_dim, (input_dim, hidden_dim)),
        "enc_b": np.zeros((1, hidden_dim)),
        "att_v": xavier(hidden_dim, (hidden_dim, attention_dim)),
        "att_u": xavier(hidden_dim, (hidden_dim, attention_dim)),
        "att_w": xavier(attention_dim, (attention_dim, 1)),
        "pen_w": he(hidden_dim, (hidden_dim, feature_dim)),
        "pen_b": np.zeros((1, feature_dim)),
        "head_w": rng.normal(0.0, 0.01, (feature_dim, n_classes)),
        "head_b": np.zeros((1, n_classes)),
    }
    return ExpertModel(label_source, input_dim, hidden_dim, attention_dim,
                       feature_dim, head, dropout_rate, seed, n_classes, params)


def abmil_pool(hidden: np.ndarray, att_v: np.ndarray, att_u: np.ndarray,
               att_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gated-attention pooling of (N, h) frame hiddens.

    Returns the pooled (h,) embedding and the (N,) attention weights, which
    form a probability vector.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    scores = (np.tanh(hidden @ att_v) * ad._sigmoid_values(hidden @ att_u)) @ att_w
    shifted = scores - scores.max()
    w = np.exp(shifted)
    w /= w.sum()
    return (w.T @ hidden)[0], w[:, 0]


def _stack_frames(bags_frames: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in bags_frames], dtype=np.intp)
    if len(bags_frames) == 1:
        flat = np.asarray(bags_frames[0], dtype=np.float64)
    else:
        flat = np.concatenate([np.asarray(f, dtype=np.float64)
                               for f in bags_frames], axis=0)
    return flat, lengths


def _forward_core(model: ExpertModel, frames_flat: np.ndarray,
                  lengths: np.ndarray, params: dict[str, Tensor],
                  train: bool, rng: np.random.Generator | None
                  ) -> tuple[Tensor, Tensor, Tensor]:
    """Shared forward: returns (logits (B,C), features (B,d), weights)."""
    if frames_flat.shape[1] != model.input_dim:
        raise ShapeError(
            f"frame dim {frames_flat.shape[1]} != encoder dim {model.input_dim}")
    x = Tensor._make(frames_flat, None)
    h = ad.relu(ad.add(ad.matmul(x, params["enc_w"]), params["enc_b"]))
    if train and model.dropout_rate > 0.0:
        h = ad.dropout(h, model.dropout_rate, rng)
    gate_act = ad.mul(ad.tanh(ad.matmul(h, params["att_v"])),
                      ad.sigmoid(ad.matmul(h, params["att_u"])))
    scores = ad.matmul(gate_act, params["att_w"])
    weights = ad.segment_softmax(scores, lengths)
    pooled = ad.segment_sum(ad.mul(weights, h), lengths)
    feats = ad.relu(ad.add(ad.matmul(pooled, params["pen_w"]), params["pen_b"]))
    if train and model.dropout_rate > 0.0:
        feats = ad.dropout(feats, model.dropout_rate, rng)
    logits = ad.add(ad.matmul(feats, params["head_w"]), params["head_b"])
    return logits, feats, weights


def forward(model: ExpertModel, bag: FeatureBag, mode: str = "eval",
            rng: np.random.Generator | None = None,
            tape: ad.Tape | None = None):
    """Single-bag forward pass.

    Returns ``(EvidentialOutput, features)`` for an evidential head or
    ``(probs, features)`` for a softmax head.  ``mode='train'`` applies
    dropout (requires ``rng``); eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    train = mode == "train" and model.dropout_rate > 0.0
    if train and rng is None:
        raise ConfigError("train-mode forward needs an rng for dropout")
    if tape is not None:
        params = {k: tape.leaf(v) for k, v in model.params.items()}
    else:
        params = {k: Tensor(v) for k, v in model.params.items()}
    flat, lengths = _stack_frames([bag.frames])
    logits, feats, _ = _forward_core(model, flat, lengths, params, train, rng)
    if model.head == EVIDENTIAL:
        return evidential_from_logits(logits), feats
    return ad.softmax(logits, axis=1), feats


def cross_entropy(logits: Tensor, labels_onehot: np.ndarray) -> Tensor:
    """Batch-mean negative log-likelihood with a stable log-softmax."""
    y = np.asarray(labels_onehot, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    row_max = Tensor(logits.values.max(axis=1, keepdims=True))
    shifted = ad.sub(logits, row_max)
    log_norm = ad.log(ad.sum_(ad.exp(shifted), axis=1, keepdims=True))
    picked = ad.sum_(ad.mul(ad.sub(shifted, log_norm), Tensor(y)),
                     axis=1, keepdims=True)
    return ad.neg(ad.mean(picked))


def _epoch_order(labels: np.ndarray, weighted: bool, n_classes: int,
                 rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    if not weighted:
        return rng.permutation(n)
    return rng.choice(n, size=n, replace=True, p=sampling_weights(labels, n_classes))


def sampling_weights(labels: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Inverse-class-frequency sampling weights, normalised to sum 1."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    w = np.where(counts[labels] > 0, 1.0 / counts[labels], 0.0)
    return w / w.sum()


def train_expert(model: ExpertModel, dataset: list[FeatureBag], cfg: TrainConfig,
                 loss: str = "edl", edl_cfg: EdlLossConfig | None = None
                 ) -> tuple[ExpertModel, list[float]]:
    """Minibatch training on the model's own label source; in-place update.

    Returns the model and the per-epoch mean training loss.  Deterministic
    for a fixed (model.seed, dataset, cfg).
    """
    if not dataset:
        raise ConfigError("empty training dataset")
    if loss not in ("edl", "cross_entropy"):
        raise ConfigError(f"unknown loss {loss!r}")
    if loss == "edl" and model.head != EVIDENTIAL:
        raise ConfigError("edl loss requires an evidential head")
    if edl_cfg is None:
        edl_cfg = EdlLossConfig()
    labels = np.array([bag.label(model.label_source) for bag in dataset])
    frames = [np.asarray(bag.frames, dtype=np.float64) for bag in dataset]
    eye = np.eye(model.n_classes)
    rng = _rng(model.seed, _TRAIN_STREAM)
    opt = AdamW(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        order = _epoch_order(labels, cfg.weighted_sampling, model.n_classes, rng)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            flat, lengths = _stack_frames([frames[i] for i in idx])
            tape = ad.Tape()
            params = {k: tape.leaf(v) for k, v in model.params.items()}
            logits, _, _ = _forward_core(model, flat, lengths, params, True, rng)
            y = eye[labels[idx]]
            if loss == "edl":
                batch_loss = edl_loss(evidential_from_logits(logits), y,
                                      epoch, edl_cfg)
            else:
                batch_loss = cross_entropy(logits, y)
            grads = tape.backward(batch_loss)
            opt.step({k: grads[t] for k, t in params.items()})
            epoch_losses.append(batch_loss.item())
        curve.append(float(np.mean(epoch_losses)))
    return model, curve


def predict_bags(model: ExpertModel, bags: list[FeatureBag],
                 train_mode: bool = False,
                 rng: np.random.Generator | None = None
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised prediction over many bags in one pass (no tape).

    Returns ``(probs (B,C), uncertainty (B,), features (B,d))``.  For the
    evidential head the uncertainty is C/S; for softmax it is the normalised
    predictive entropy.
    """
    params = {k: Tensor(v) for k, v in model.params.items()}
    flat, lengths = _stack_frames([b.frames for b in bags])
    train = train_mode and model.dropout_rate > 0.0
    logits, feats, _ = _forward_core(model, flat, lengths, params, train, rng)
    if model.head == EVIDENTIAL:
        out = evidential_from_logits(logits)
        return out.probs.values, out.uncertainty.values[:, 0], feats.values
    probs = ad.softmax(logits, axis=1).values
    return probs, normalized_entropy(probs), feats.values


def normalized_entropy(probs: np.ndarray) -> np.ndarray:
    """Predictive entropy scaled to [0, 1] by ln(C); rows must sum to 1."""
    p = np.asarray(probs, dtype=np.float64)
    h = -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)
    return h / np.log(p.shape[-1])


def mc_dropout_predict(model: ExpertModel, bags: list[FeatureBag], passes: int,
                       seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean softmax probabilities over stochastic forward passes.

    Uncertainty is the normalised entropy of the mean distribution.  With
    ``dropout_rate == 0`` all passes coincide with the eval forward.
    """
    if model.head != SOFTMAX:
        raise ConfigError("mc_dropout_predict expects a softmax head")
    if passes < 1:
        raise ConfigError("passes must be >= 1")
    rng = _rng(model.seed if seed is None else seed, _MC_STREAM)
    acc = None
    for _ in range(passes):
        probs, _, _ = predict_bags(model, bags, train_mode=True, rng=rng)
        acc = probs if acc is None else acc + probs
    mean_probs = acc / passes
    return mean_probs, normalized_entropy(mean_probs)


def ensemble_predict(models: list[ExpertModel], bags: list[FeatureBag]
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Uniform average of member eval probabilities plus entropy uncertainty."""
    if len(models) < 2:
        raise ConfigError("ensemble needs at least 2 members")
    n_classes = {m.n_classes for m in models}
    if len(n_classes) != 1:
        raise ConfigError("ensemble members disagree on class count")
    stack = np.stack([predict_bags(m, bags)[0] for m in models], axis=0)
    # Sort member contributions so the average is exactly permutation
    # invariant at the bit level.
    mean_probs = np.add.reduce(np.sort(stack, axis=0), axis=0) / len(models)
    return mean_probs, normalized_entropy(mean_probs)
