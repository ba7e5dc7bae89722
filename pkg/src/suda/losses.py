"""Loss terms and the combined training objective.

Sign conventions, fixed here and used by the trainer:

- ``adversarial_loss`` is the discriminator's payoff,
  E[log C(src)] + E[log(1 - C(tgt))]; the discriminator is updated to
  maximize it.  The generator side minimizes the label-flipped confusion
  term instead of maximizing this one (non-saturating arrangement); the
  reported adversarial value is always this function's.
- ``total_objective`` assembles the generator-side reported view
  total = L_sup - lambda_c * L_adv + lambda_s * (L_dis + L_sim).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ConfigError, DataError, DegenerateInputError, DimensionError,
                     DomainError, NumericError)


@dataclass(frozen=True)
class LossWeights:
    """Balance weights of the combined objective."""

    lambda_c: float = 0.1
    lambda_s: float = 1.0

    def __post_init__(self):
        for name in ("lambda_c", "lambda_s"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar report of one generator-side objective evaluation."""

    l_sup: float
    l_adv: float
    l_dis: float
    l_sim: float
    l_self: float
    total: float


def _as_prob_matrix(p, name):
    p = p if isinstance(p, Tensor) else Tensor(p)
    if len(p.shape) != 2:
        raise DimensionError(f"{name}: expected batch x K probabilities, got {p.shape}")
    return p


def supervised_loss(probs, labels) -> Tensor:
    """Mean negative log-likelihood of the correct classes."""
    probs = _as_prob_matrix(probs, "supervised_loss")
    labels = np.asarray(labels)
    b, k = probs.shape
    if labels.shape != (b,):
        raise DataError(f"supervised_loss: {b} rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k
                        or not np.issubdtype(labels.dtype, np.integer)):
        raise DataError(f"supervised_loss: labels must be integers in [0, {k})")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = ad.reduce_sum(ad.mul(probs, Tensor(onehot)), axes=1)
    return ad.scale(ad.reduce_mean(ad.log(picked)), -1.0)


def _check_scores(scores, name):
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    if len(scores.shape) != 1 or scores.shape[0] < 1:
        raise DimensionError(f"{name}: expected a non-empty score vector, got {scores.shape}")
    if np.any(scores.data <= 0.0) or np.any(scores.data >= 1.0):
        raise DomainError(f"{name}: scores must lie strictly in (0,1)")
    return scores


def adversarial_loss(src_scores, tgt_scores) -> Tensor:
    """E[log C(src)] + E[log(1 - C(tgt))]; at most 0, peaking for a
    discriminator that is confidently right on both domains."""
    src = _check_scores(src_scores, "adversarial_loss")
    tgt = _check_scores(tgt_scores, "adversarial_loss")
    return ad.add(ad.reduce_mean(ad.log(src)),
                  ad.reduce_mean(ad.log(ad.sub(1.0, tgt))))


def adversarial_loss_from_logits(src_logits, tgt_logits) -> Tensor:
    """Same value as :func:`adversarial_loss` on sigmoid(logits), computed
    via log-sigmoid so saturated discriminators cannot produce -inf.

    log C = log_sigmoid(z) and log(1 - C) = log_sigmoid(-z).
    """
    return ad.add(ad.reduce_mean(ad.log_sigmoid(src_logits)),
                  ad.reduce_mean(ad.log_sigmoid(ad.scale(tgt_logits, -1.0))))


def confusion_loss_from_logits(tgt_logits) -> Tensor:
    """Mean log-sigmoid of target-view discriminator logits.

    This is the non-saturating generator reward: it grows as the
    discriminator starts scoring target views as source.  The generator
    maximizes it (the training loop subtracts it, scaled by lambda_c).
    Source views carry no confusion term, so the supervised signal on
    them is never in tension with domain alignment.
    """
    return ad.reduce_mean(ad.log_sigmoid(tgt_logits))


def discrepancy_loss(theta1, theta2) -> Tensor:
    """Cosine similarity of two parameter vectors, in [-1, 1].

    Minimizing it pushes the two spectrum transformers apart.  A zero
    vector has no direction; that is an error rather than a convention.
    """
    t1 = theta1 if isinstance(theta1, Tensor) else Tensor(theta1)
    t2 = theta2 if isinstance(theta2, Tensor) else Tensor(theta2)
    if len(t1.shape) != 1 or t1.shape != t2.shape:
        raise DimensionError(f"discrepancy_loss: need equal-length vectors, "
                             f"got {t1.shape} and {t2.shape}")
    if not np.any(t1.data) or not np.any(t2.data):
        raise DegenerateInputError("discrepancy_loss: zero parameter vector "
                                   "has no cosine direction")
    dot = ad.reduce_sum(ad.mul(t1, t2))
    n1 = ad.sqrt(ad.reduce_sum(ad.square(t1)))
    n2 = ad.sqrt(ad.reduce_sum(ad.square(t2)))
    return ad.div(dot, ad.mul(n1, n2))


def similarity_loss(p1, p2) -> Tensor:
    """Batch mean of per-sample Euclidean distance between predictions."""
    p1 = _as_prob_matrix(p1, "similarity_loss")
    p2 = _as_prob_matrix(p2, "similarity_loss")
    if p1.shape != p2.shape:
        raise DimensionError(f"similarity_loss: shapes {p1.shape} vs {p2.shape}")
    diff = ad.sub(p1, p2)
    per_sample = ad.sqrt(ad.reduce_sum(ad.square(diff), axes=1))
    return ad.reduce_mean(per_sample)


def self_supervision_loss(l_dis, l_sim, dis_weight: float = 1.0, sim_weight: float = 1.0):
    """L_self as a weighted sum of its two parts (both weights default 1)."""
    return ad.add(ad.scale(l_dis, dis_weight), ad.scale(l_sim, sim_weight))


def total_objective(l_sup: float, l_adv: float, l_dis: float, l_sim: float,
                    weights: LossWeights) -> LossBreakdown:
    """Assemble the reported generator-side breakdown from scalar parts."""
    parts = {"L_sup": l_sup, "L_adv": l_adv, "L_dis": l_dis, "L_sim": l_sim}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericError(f"total_objective: {name} is not finite ({value})")
    l_self = l_dis + l_sim
    total = l_sup - weights.lambda_c * l_adv + weights.lambda_s * l_self
    return LossBreakdown(l_sup=l_sup, l_adv=l_adv, l_dis=l_dis, l_sim=l_sim,
                         l_self=l_self, total=total)
