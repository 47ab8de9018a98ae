"""Learned fusion of K frozen evidential experts.

A shared two-layer MLP embeds each expert's penultimate features; three
linear heads then produce per-expert probability weights (tanh), per-expert
uncertainty weights (sigmoid) and a per-sample additive uncertainty
correction (tanh on the expert-mean shared feature).  Fused probabilities
are clamped and renormalised onto the simplex; fused uncertainty is clamped
to [0, 1].  ``naive_fuse`` is the parameter-free averaging baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FeatureBag
from .errors import ConfigError, ShapeError
from .evidential import EvidentialOutput
from .expert import ExpertModel, TrainConfig, _rng, _epoch_order, predict_bags
from .optim import AdamW

PROB_FLOOR = 1e-6
UNC_WEIGHT_FLOOR = 1e-6


@dataclass
class GateModel:
    n_experts: int
    feature_dim: int
    shared_dim: int
    dropout_rate: float
    seed: int
    params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class GateLossConfig:
    """Penalty strengths for the uncertainty and epsilon regularisers."""

    beta1: float = 1.0
    beta2: float = 5.0
    gamma1: float = 1.0
    gamma2: float = 5.0

    def __post_init__(self):
        for v in (self.beta1, self.beta2, self.gamma1, self.gamma2):
            if v < 0:
                raise ConfigError("loss coefficients must be non-negative")
        if self.beta1 + self.beta2 <= 0 or self.gamma1 + self.gamma2 <= 0:
            raise ConfigError("at least one coefficient of each pair must be > 0")


@dataclass
class FusedOutput:
    """Fused batch prediction; Tensors keep the graph alive for training."""

    probs: Tensor           # (B, C) on the simplex
    uncertainty: Tensor     # (B, 1) in [0, 1]
    epsilon: Tensor         # (B, 1) in (-1, 1)
    prob_weights: np.ndarray   # (B, K)
    unc_weights: np.ndarray    # (B, K)
    correctness: np.ndarray | None = None


def init_gate(n_experts: int, feature_dim: int, shared_dim: int,
              dropout_rate: float, seed: int) -> GateModel:
    """Heads start near-uniform so the initial gate matches naive averaging."""
    if n_experts < 2:
        raise ConfigError("gate needs at least 2 experts")
    rng = _rng(seed, 0)
    he = lambda fan_in, shape: rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    params = {
        "sh1_w": he(feature_dim, (feature_dim, shared_dim)),
        "sh1_b": np.zeros((1, shared_dim)),
        "sh2_w": he(shared_dim, (shared_dim, shared_dim)),
        "sh2_b": np.zeros((1, shared_dim)),
        "prob_w": rng.normal(0.0, 0.01, (shared_dim, 1)),
        "prob_b": np.full((1, 1), 1.0),
        "unc_w": rng.normal(0.0, 0.01, (shared_dim, 1)),
        "unc_b": np.zeros((1, 1)),
        "eps_w": rng.normal(0.0, 0.01, (shared_dim, 1)),
        "eps_b": np.zeros((1, 1)),
    }
    return GateModel(n_experts, feature_dim, shared_dim, dropout_rate, seed, params)


def _gate_core(gate: GateModel, feats_flat: Tensor, params: dict[str, Tensor],
               train: bool, rng: np.random.Generator | None
               ) -> tuple[Tensor, Tensor, Tensor]:
    """Shared MLP + heads over (B*K, d) stacked expert features.

    Returns per-expert probability weights (B*K, 1), clamped uncertainty
    weights (B*K, 1) and the per-sample epsilon (B, 1).
    """
    k = gate.n_experts
    s = ad.relu(ad.add(ad.matmul(feats_flat, params["sh1_w"]), params["sh1_b"]))
    if train and gate.dropout_rate > 0.0:
        s = ad.dropout(s, gate.dropout_rate, rng)
    s = ad.relu(ad.add(ad.matmul(s, params["sh2_w"]), params["sh2_b"]))
    if train and gate.dropout_rate > 0.0:
        s = ad.dropout(s, gate.dropout_rate, rng)
    w_p = ad.tanh(ad.add(ad.matmul(s, params["prob_w"]), params["prob_b"]))
    w_u = ad.clamp_min(
        ad.sigmoid(ad.add(ad.matmul(s, params["unc_w"]), params["unc_b"])),
        UNC_WEIGHT_FLOOR)
    s_mean = ad.mul(ad.fold_rows(s, k), 1.0 / k)
    eps = ad.tanh(ad.add(ad.matmul(s_mean, params["eps_w"]), params["eps_b"]))
    return w_p, w_u, eps


def fuse(probs_flat: Tensor, unc_flat: Tensor, w_p: Tensor, w_u: Tensor,
         eps: Tensor, n_experts: int) -> tuple[Tensor, Tensor]:
    """Weighted aggregation of (B*K, C) probabilities and (B*K, 1) uncertainties.

    Raw fused probabilities (mean of w_p-weighted expert rows) are clamped at
    ``PROB_FLOOR`` and renormalised; raw fused uncertainty (w_u-weighted mean
    plus epsilon) is clamped to [0, 1].
    """
    p_raw = ad.mul(ad.fold_rows(ad.mul(w_p, probs_flat), n_experts), 1.0 / n_experts)
    p_pos = ad.clamp_min(p_raw, PROB_FLOOR)
    p_hat = ad.div(p_pos, ad.sum_(p_pos, axis=1, keepdims=True))
    numer = ad.fold_rows(ad.mul(w_u, unc_flat), n_experts)
    denom = ad.fold_rows(w_u, n_experts)
    u_raw = ad.add(ad.div(numer, denom), eps)
    u_hat = ad.clamp_max(ad.clamp_min(u_raw, 0.0), 1.0)
    return p_hat, u_hat


def _stack_expert_outputs(expert_outputs: Sequence[tuple[EvidentialOutput, Tensor]]
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Interleave K per-expert (B, .) arrays into (B*K, .) sample-major stacks."""
    k = len(expert_outputs)
    if k < 2:
        raise ConfigError("fusion needs at least 2 experts")
    probs = [np.atleast_2d(o.probs.values if isinstance(o.probs, Tensor) else o.probs)
             for o, _ in expert_outputs]
    uncs = [np.atleast_2d(o.uncertainty.values if isinstance(o.uncertainty, Tensor)
                          else o.uncertainty) for o, _ in expert_outputs]
    feats = [np.atleast_2d(g.values if isinstance(g, Tensor) else g)
             for _, g in expert_outputs]
    dims = {f.shape[1] for f in feats}
    if len(dims) != 1:
        raise ShapeError(f"expert feature dims disagree: {sorted(dims)}")
    b = probs[0].shape[0]
    p = np.stack(probs, axis=1).reshape(b * k, -1)
    u = np.stack(uncs, axis=1).reshape(b * k, 1)
    g = np.stack(feats, axis=1).reshape(b * k, -1)
    return p, u, g


def gate_forward(gate: GateModel, expert_outputs: Sequence[tuple[EvidentialOutput, Tensor]],
                 tape: ad.Tape | None = None, train: bool = False,
                 rng: np.random.Generator | None = None) -> FusedOutput:
    """Fuse per-expert outputs (each batched (B, .)) into a FusedOutput."""
    p_np, u_np, g_np = _stack_expert_outputs(expert_outputs)
    k = len(expert_outputs)
    if k != gate.n_experts:
        raise ShapeError(f"gate expects {gate.n_experts} experts, got {k}")
    if g_np.shape[1] != gate.feature_dim:
        raise ShapeError(
            f"expert feature dim {g_np.shape[1]} != gate dim {gate.feature_dim}")
    if tape is not None:
        params = {name: tape.leaf(v) for name, v in gate.params.items()}
    else:
        params = {name: Tensor(v) for name, v in gate.params.items()}
    w_p, w_u, eps = _gate_core(gate, Tensor(g_np), params, train, rng)
    p_hat, u_hat = fuse(Tensor(p_np), Tensor(u_np), w_p, w_u, eps, k)
    b = p_hat.shape[0]
    return FusedOutput(
        probs=p_hat,
        uncertainty=u_hat,
        epsilon=eps,
        prob_weights=w_p.values.reshape(b, k),
        unc_weights=w_u.values.reshape(b, k),
    )


def gate_predict(gate: GateModel, probs: np.ndarray, uncertainties: np.ndarray,
                 features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised eval-mode fusion over (B, K, .) arrays, no tape.

    Returns (fused probs (B, C), fused uncertainty (B,), w_p (B, K),
    w_u (B, K), epsilon (B,)).  Matches ``gate_forward`` exactly.
    """
    b, k, d = features.shape
    if k != gate.n_experts or d != gate.feature_dim:
        raise ShapeError("feature stack does not match gate dimensions")
    p = gate.params
    s = np.maximum(features.reshape(b * k, d) @ p["sh1_w"] + p["sh1_b"], 0.0)
    s = np.maximum(s @ p["sh2_w"] + p["sh2_b"], 0.0)
    w_p = np.tanh(s @ p["prob_w"] + p["prob_b"]).reshape(b, k)
    w_u = np.maximum(ad._sigmoid_values(s @ p["unc_w"] + p["unc_b"]),
                     UNC_WEIGHT_FLOOR).reshape(b, k)
    s_mean = s.reshape(b, k, -1).sum(axis=1) * (1.0 / k)
    eps = np.tanh(s_mean @ p["eps_w"] + p["eps_b"])[:, 0]
    p_raw = (w_p[:, :, None] * probs).sum(axis=1) * (1.0 / k)
    p_pos = np.maximum(p_raw, PROB_FLOOR)
    p_hat = p_pos / p_pos.sum(axis=1, keepdims=True)
    u_raw = (w_u * uncertainties).sum(axis=1) / w_u.sum(axis=1) + eps
    u_hat = np.clip(u_raw, 0.0, 1.0)
    return p_hat, u_hat, w_p, w_u, eps


def gate_loss(fused: FusedOutput, labels: np.ndarray, cfg: GateLossConfig,
              correctness: np.ndarray | None = None) -> Tensor:
    """Composite batch-mean loss: NLL + uncertainty and epsilon regularisers.

    Correctness ``c_i = 1[argmax fused.probs == label]`` is recomputed from
    the current forward unless given explicitly, and never carries gradient.
    """
    labels = np.asarray(labels, dtype=np.intp)
    b, n_classes = fused.probs.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if correctness is None:
        correctness = (fused.probs.values.argmax(axis=1) == labels)
    c = np.asarray(correctness, dtype=np.float64).reshape(b, 1)
    y = np.eye(n_classes)[labels]
    nll = ad.neg(ad.sum_(ad.mul(ad.log(fused.probs), Tensor(y)),
                         axis=1, keepdims=True))
    u = fused.uncertainty
    unc_term = ad.add(ad.mul(ad.mul(u, Tensor(c)), cfg.beta1),
                      ad.mul(ad.mul(ad.sub(1.0, u), Tensor(1.0 - c)), cfg.beta2))
    eps_term = ad.add(ad.mul(ad.mul(ad.relu(fused.epsilon), Tensor(c)), cfg.gamma1),
                      ad.mul(ad.mul(ad.relu(ad.neg(fused.epsilon)), Tensor(1.0 - c)),
                             cfg.gamma2))
    per_sample = ad.add(ad.add(nll, unc_term), eps_term)
    return ad.mean(per_sample)


def naive_fuse_arrays(probs: np.ndarray, uncertainties: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted average over the expert axis of (B, K, C) probabilities
    and (B, K) uncertainties.

    Contributions are sorted before summation so the result is bitwise
    invariant under expert permutation.
    """
    k = probs.shape[1]
    p_hat = np.add.reduce(np.sort(probs, axis=1), axis=1) / k
    u_hat = np.add.reduce(np.sort(uncertainties, axis=1), axis=1) / k
    return p_hat, u_hat


def naive_fuse(expert_outputs: Sequence[EvidentialOutput]) -> FusedOutput:
    """Parameter-free fusion: average expert probabilities and uncertainties."""
    k = len(expert_outputs)
    if k < 2:
        raise ConfigError("naive fusion needs at least 2 experts")
    p_stack = np.stack([np.atleast_2d(o.probs.values) for o in expert_outputs],
                       axis=1)
    u_stack = np.stack([np.atleast_2d(o.uncertainty.values)[:, 0]
                        for o in expert_outputs], axis=1)
    p_hat, u_hat = naive_fuse_arrays(p_stack, u_stack)
    b = p_hat.shape[0]
    return FusedOutput(
        probs=Tensor(p_hat),
        uncertainty=Tensor(u_hat.reshape(b, 1)),
        epsilon=Tensor(np.zeros((b, 1))),
        prob_weights=np.full((b, k), 1.0 / k),
        unc_weights=np.full((b, k), 1.0 / k),
    )


def expert_param_digest(experts: Sequence[ExpertModel]) -> str:
    """SHA-256 over all expert parameters, for freeze verification."""
    import hashlib

    h = hashlib.sha256()
    for model in experts:
        for name in sorted(model.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()


def train_gate(gate: GateModel, experts: Sequence[ExpertModel],
               dataset: list[FeatureBag], cfg: TrainConfig,
               loss_cfg: GateLossConfig) -> tuple[GateModel, list[float]]:
    """Train the gate on final trial labels with experts frozen.

    Expert outputs are precomputed in eval mode once; only gate parameters
    receive gradients.  Deterministic per gate.seed.
    """
    if not dataset:
        raise ConfigError("empty training dataset")
    dims = {m.feature_dim for m in experts}
    if len(dims) != 1:
        raise ConfigError(f"expert feature dims disagree: {sorted(dims)}")
    if len(experts) != gate.n_experts:
        raise ConfigError(
            f"gate expects {gate.n_experts} experts, got {len(experts)}")
    per_expert = [predict_bags(m, dataset) for m in experts]
    probs = np.stack([pe[0] for pe in per_expert], axis=1)      # (n, K, C)
    uncs = np.stack([pe[1] for pe in per_expert], axis=1)       # (n, K)
    feats = np.stack([pe[2] for pe in per_expert], axis=1)      # (n, K, d)
    labels = np.array([bag.final_label for bag in dataset])
    n, k, n_classes = probs.shape
    rng = _rng(gate.seed, 1)
    opt = AdamW(gate.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    curve: list[float] = []
    for _ in range(cfg.epochs):
        order = _epoch_order(labels, cfg.weighted_sampling, n_classes, rng)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = idx.shape[0]
            tape = ad.Tape()
            params = {name: tape.leaf(v) for name, v in gate.params.items()}
            w_p, w_u, eps = _gate_core(
                gate, Tensor(feats[idx].reshape(b * k, -1)), params, True, rng)
            p_hat, u_hat = fuse(Tensor(probs[idx].reshape(b * k, -1)),
                                Tensor(uncs[idx].reshape(b * k, 1)),
                                w_p, w_u, eps, k)
            fused = FusedOutput(p_hat, u_hat, eps,
                                w_p.values.reshape(b, k), w_u.values.reshape(b, k))
            batch_loss = gate_loss(fused, labels[idx], loss_cfg)
            grads = tape.backward(batch_loss)
            opt.step({name: grads[t] for name, t in params.items()})
            epoch_losses.append(batch_loss.item())
        curve.append(float(np.mean(epoch_losses)))
    return gate, curve
