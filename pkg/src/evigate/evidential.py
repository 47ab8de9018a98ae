"""Dirichlet-evidence quantities and the annealed evidential training loss.

Class logits are mapped through softplus to non-negative evidence ``e``;
``alpha = e + 1`` parameterises a Dirichlet over class probabilities whose
total strength ``S = sum(alpha)`` yields the predictive distribution
``p = alpha / S`` and a scalar uncertainty ``u = C / S`` in (0, 1].  The
training loss combines a digamma cross-entropy term with a KL regulariser
against the uniform Dirichlet, ramped in by ``min(1, t / T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import special
from .autodiff import Tensor
from .errors import DomainError, ShapeError


@dataclass
class EvidentialOutput:
    """Per-sample evidence, Dirichlet parameters and derived quantities.

    All fields are Tensors with a leading batch axis: ``evidence``, ``alpha``
    and ``probs`` are (B, C); ``strength`` and ``uncertainty`` are (B, 1).
    """

    evidence: Tensor
    alpha: Tensor
    strength: Tensor
    probs: Tensor
    uncertainty: Tensor

    @property
    def n_classes(self) -> int:
        return self.alpha.shape[1]


@dataclass
class EdlLossConfig:
    """Annealing threshold (epochs) and KL evidence-adjustment switch."""

    annealing_epochs: int = 10
    kl_evidence_adjustment: bool = True

    def __post_init__(self):
        if self.annealing_epochs < 1:
            raise ValueError("annealing_epochs must be >= 1")


def evidential_from_logits(logits) -> EvidentialOutput:
    """Map raw class logits (B, C) or (C,) to evidential quantities."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    if logits.values.ndim == 1:
        logits = Tensor._make(logits.values.reshape(1, -1), logits.tape)
    n_classes = logits.shape[1]
    evidence = ad.softplus(logits)
    alpha = ad.add(evidence, 1.0)
    strength = ad.sum_(alpha, axis=1, keepdims=True)
    probs = ad.div(alpha, strength)
    uncertainty = ad.div(float(n_classes), strength)
    return EvidentialOutput(evidence, alpha, strength, probs, uncertainty)


def kl_dirichlet_vs_uniform(alpha) -> Tensor:
    """KL divergence of Dir(alpha) from the uniform Dirichlet, per row.

    Closed form for alpha_c >= 1 (guaranteed when alpha = evidence + 1):
    lnG(S) - sum_c lnG(a_c) - lnG(C) + sum_c (a_c - 1)(psi(a_c) - psi(S)).
    """
    if not isinstance(alpha, Tensor):
        alpha = Tensor(np.atleast_2d(np.asarray(alpha, dtype=np.float64)))
    if np.any(alpha.values < 1.0 - 1e-12):
        raise DomainError("kl_dirichlet_vs_uniform requires alpha >= 1")
    n_classes = alpha.shape[1]
    strength = ad.sum_(alpha, axis=1, keepdims=True)
    term_gamma = ad.sub(ad.lgamma(strength),
                        ad.sum_(ad.lgamma(alpha), axis=1, keepdims=True))
    centered = ad.sub(ad.digamma(alpha), ad.digamma(strength))
    term_psi = ad.sum_(ad.mul(ad.sub(alpha, 1.0), centered), axis=1, keepdims=True)
    log_gamma_c = float(special.lgamma(float(n_classes)))
    return ad.sub(ad.add(term_gamma, term_psi), log_gamma_c)


def annealing_coefficient(epoch: int, annealing_epochs: int) -> float:
    """KL ramp min(1, t / T); non-decreasing in t, clamps at 1."""
    if annealing_epochs < 1:
        raise ValueError("annealing_epochs must be >= 1")
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(1.0, epoch / annealing_epochs)


def edl_loss(output: EvidentialOutput, labels_onehot: np.ndarray, epoch: int,
             cfg: EdlLossConfig) -> Tensor:
    """Batch-mean evidential loss at training epoch ``epoch``.

    The classification part is sum_c y_c (psi(S) - psi(alpha_c)) per sample;
    the KL part regularises either the raw alpha or, with
    ``kl_evidence_adjustment``, alpha with the true class's evidence removed
    (y + (1 - y) * alpha).
    """
    y = np.asarray(labels_onehot, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(1, -1)
    if y.shape != output.alpha.shape:
        raise ShapeError(
            f"labels shape {y.shape} does not match alpha {output.alpha.shape}")
    psi_gap = ad.sub(ad.digamma(output.strength), ad.digamma(output.alpha))
    cls_term = ad.sum_(ad.mul(psi_gap, Tensor(y)), axis=1, keepdims=True)
    lam = annealing_coefficient(epoch, cfg.annealing_epochs)
    if lam > 0.0:
        if cfg.kl_evidence_adjustment:
            adjusted = ad.add(ad.mul(output.alpha, Tensor(1.0 - y)), Tensor(y))
        else:
            adjusted = output.alpha
        kl = kl_dirichlet_vs_uniform(adjusted)
        per_sample = ad.add(cls_term, ad.mul(kl, lam))
    else:
        per_sample = cls_term
    return ad.mean(per_sample)
