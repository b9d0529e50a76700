"""Losses: ID cross-entropy, soft-margin batch-hard triplet, temperature
distillation, X-Triplet, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor


@dataclass
class TripletSelection:
    anchor_idx: np.ndarray
    pos_idx: np.ndarray
    neg_idx: np.ndarray
    d_ap: np.ndarray
    d_an: np.ndarray


@dataclass
class LossBreakdown:
    l_ins: float
    l_intrax: float
    l_interx: float
    l_total: float
    components: dict[str, float] = field(default_factory=dict)
    total: Tensor | None = None
    teacher: np.ndarray | None = None  # f_IntraX, when the teacher ran

    def as_dict(self) -> dict[str, float]:
        return {"l_ins": self.l_ins, "l_intrax": self.l_intrax, "l_interx": self.l_interx,
                "l_total": self.l_total, **self.components}


def id_loss(features: Tensor, labels, classifier: Tensor, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of ``features @ classifier`` logits."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = classifier.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    logp = T.log_softmax(features @ classifier, axis=-1)
    target = np.zeros(logp.shape, dtype=logp.dtype)
    target[np.arange(len(labels)), labels] = 1.0
    if label_smoothing:
        target = (1.0 - label_smoothing) * target + label_smoothing / num_classes
    return T.neg(T.mean(T.tsum(logp * Tensor(target, dtype=logp.dtype), axis=-1)))


def pairwise_sq_dist(features: np.ndarray) -> np.ndarray:
    f = np.ascontiguousarray(features)
    return kernels.pairwise_sq_dist(f, f)


def batch_hard_mine(features, labels) -> TripletSelection:
    """Per anchor: farthest same-identity and nearest other-identity sample.

    Ties resolve to the lowest batch index.
    """
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise ValueError("batch-hard mining needs at least 2 identities in the batch")
    if counts.min() < 2:
        raise ValueError(f"identity {ids[counts.argmin()]} has a single instance in the batch")
    dist = pairwise_sq_dist(data)
    pos, neg, d_ap, d_an = kernels.batch_hard(dist, labels)
    return TripletSelection(np.arange(len(labels)), np.asarray(pos), np.asarray(neg), np.asarray(d_ap), np.asarray(d_an))


def l2_normalize(f: Tensor, eps: float = 1e-12) -> Tensor:
    return f / T.sqrt(T.tsum(f * f, axis=-1, keepdims=True) + eps)


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, normalize: bool = False) -> Tensor:
    """log(1 + exp(|a-p|^2 - |a-n|^2)), averaged over any leading rows."""
    if normalize:
        f_a, f_p, f_n = l2_normalize(f_a), l2_normalize(f_p), l2_normalize(f_n)
    gap = T.sq_euclidean(f_a, f_p) - T.sq_euclidean(f_a, f_n)
    return T.mean(T.softplus(gap))


def softmax_distribution(f: Tensor, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return T.cast(T.softmax(T.mul_scalar(T.cast(f, np.float64), 1.0 / tau), axis=-1), f.dtype)


def intrax_loss(f_intrax: Tensor, f_ins: Tensor, tau: float = 0.05) -> Tensor:
    """Cross-entropy from the teacher's tempered distribution to the student's.

    The teacher feature is detached; only ``f_ins`` receives gradient.
    Computed in float64 and averaged over leading rows.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if f_intrax.shape != f_ins.shape:
        raise ValueError(f"teacher {f_intrax.shape} and student {f_ins.shape} features differ in shape")
    t = f_intrax.data.astype(np.float64) / tau
    e = np.exp(t - t.max(axis=-1, keepdims=True))
    p_teacher = Tensor(e / e.sum(axis=-1, keepdims=True), dtype=np.float64)
    logp_student = T.log_softmax(T.mul_scalar(T.cast(f_ins, np.float64), 1.0 / tau), axis=-1)
    return T.cast(T.neg(T.mean(T.tsum(p_teacher * logp_student, axis=-1))), f_ins.dtype)


def xtriplet_loss(f_interx: Tensor, f_pos: Tensor, f_neg: Tensor, normalize: bool = False,
                  detach_targets: bool = False) -> Tensor:
    """Triplet loss with the fused feature in the anchor slot."""
    if detach_targets:
        f_pos, f_neg = f_pos.detach(), f_neg.detach()
    return triplet_loss(f_interx, f_pos, f_neg, normalize=normalize)


def assemble_total(l_ins: Tensor, l_intrax: Tensor | None, l_interx: Tensor | None,
                   lambda1: float, lambda2: float, components: dict[str, float] | None = None) -> LossBreakdown:
    """l_total = l_ins + lambda1 * l_intrax + lambda2 * l_interx."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    total = l_ins
    if l_intrax is not None:
        total = total + T.mul_scalar(l_intrax, lambda1)
    if l_interx is not None:
        total = total + T.mul_scalar(l_interx, lambda2)
    return LossBreakdown(
        l_ins=l_ins.item(),
        l_intrax=l_intrax.item() if l_intrax is not None else 0.0,
        l_interx=l_interx.item() if l_interx is not None else 0.0,
        l_total=total.item(),
        components=dict(components or {}),
        total=total,
    )
