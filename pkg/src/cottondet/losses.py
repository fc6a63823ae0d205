"""Class-weighted focal loss, objectness BCE, SIoU regression and their combination."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import AssignmentResult, BBox, boxes_to_array, siou_terms
from .tensor import Tensor

LOG_EPS = 1e-7


def calculate_class_weights(class_counts: Sequence[int]) -> list[float]:
    """Inverse-frequency class weights.

    raw_c = N_total / (C_nonzero * N_c); empty classes take the largest raw
    weight. The result is rescaled so that its mean weighted by class
    frequency is exactly 1.
    """
    counts = np.asarray(list(class_counts), dtype=np.float64)
    if counts.size == 0:
        raise ValueError("calculate_class_weights: no classes given")
    if np.any(counts < 0):
        raise ValueError("calculate_class_weights: counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("calculate_class_weights: all class counts are zero")
    nonzero = counts > 0
    raw = np.zeros_like(counts)
    raw[nonzero] = total / (nonzero.sum() * counts[nonzero])
    raw[~nonzero] = raw[nonzero].max()
    freq_mean = float(np.sum(counts / total * raw))
    return list(raw / freq_mean)


@dataclass
class FocalParams:
    gamma: float = 2.0
    class_weights: list[float] = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")

    @classmethod
    def from_counts(cls, class_counts: Sequence[int], gamma: float = 2.0) -> "FocalParams":
        return cls(gamma=gamma, class_weights=calculate_class_weights(class_counts))

    @classmethod
    def uniform(cls, n_classes: int, gamma: float = 2.0) -> "FocalParams":
        return cls(gamma=gamma, class_weights=[1.0] * n_classes)


def focal_loss(p: float, class_id: int, params: FocalParams) -> float:
    """-alpha_c * (1 - p)**gamma * log(p); p is clamped to at least 1e-7."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"focal_loss: p must lie in [0, 1], got {p}")
    alpha = params.class_weights[class_id]
    if p >= 1.0:
        return 0.0
    q = max(p, LOG_EPS)
    return -alpha * (1.0 - q) ** params.gamma * math.log(q)


def objectness_bce(pred: float, target: int) -> float:
    """Binary cross-entropy with the prediction clamped to [1e-7, 1 - 1e-7]."""
    if target not in (0, 1):
        raise ValueError(f"objectness target must be 0 or 1, got {target}")
    q = min(max(pred, LOG_EPS), 1.0 - LOG_EPS)
    return -(target * math.log(q) + (1 - target) * math.log(1.0 - q))


# ---------------------------------------------------------------------------
# Differentiable versions
# ---------------------------------------------------------------------------


def focal_terms(q: Tensor, weights: np.ndarray | float, gamma: float) -> Tensor:
    """Elementwise -w * (1 - q)**gamma * log(q), where q is the probability of the target."""
    mod = T.power(1.0 - q, gamma)
    logq = T.log(T.clamp(q, lo=LOG_EPS))
    out = T.neg(mod * logq)
    if np.isscalar(weights):
        return out * float(weights) if weights != 1 else out
    return out * Tensor(np.asarray(weights), dtype=q.dtype)


def bce_terms(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise BCE on probabilities."""
    target = np.asarray(target, dtype=pred.dtype)
    q = T.clamp(pred, LOG_EPS, 1.0 - LOG_EPS)
    t = Tensor(target, dtype=pred.dtype)
    return T.neg(t * T.log(q) + (1.0 - t) * T.log(1.0 - q))


@dataclass
class LossWeights:
    cls: float = 0.5
    reg: float = 7.5
    obj: float = 1.0


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    obj: float
    total: float
    lambda_cls: float
    lambda_reg: float
    lambda_obj: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def loss_tensors(
    pred_boxes: Tensor,
    pred_scores: Tensor,
    pred_obj: Tensor,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    assignment: AssignmentResult,
    focal: FocalParams,
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Return (total, cls, reg, obj) as differentiable scalars.

    Classification uses a per-class binary focal term: the assigned class of a
    positive targets p, every other (prediction, class) pair targets 1 - p.
    The class weight alpha_c multiplies only the positive term.
    """
    n_pred, n_cls = pred_scores.shape
    if n_pred == 0:
        zero = Tensor(0.0, dtype=pred_scores.dtype)
        return zero, zero, zero, zero
    pos = np.asarray(assignment.positive, dtype=bool)
    target = np.zeros((n_pred, n_cls), dtype=bool)
    w = np.ones((n_pred, n_cls))
    if pos.any():
        cls_of_pos = np.asarray(gt_classes, dtype=np.int64)[assignment.matched_gt[pos]]
        target[np.flatnonzero(pos), cls_of_pos] = True
        w[np.flatnonzero(pos), cls_of_pos] = np.asarray(focal.class_weights)[cls_of_pos]
    q = T.where(target, pred_scores, 1.0 - pred_scores)
    cls = T.tsum(focal_terms(q, w, focal.gamma)) * (1.0 / max(n_pred, 1))

    obj = T.tmean(bce_terms(pred_obj, pos.astype(np.float64)))

    if pos.any():
        idx = np.flatnonzero(pos)
        matched = np.asarray(gt_boxes, dtype=np.float64)[assignment.matched_gt[idx]]
        reg = T.tmean(siou_terms(pred_boxes[idx], Tensor(matched, dtype=pred_boxes.dtype)))
    else:
        reg = Tensor(0.0, dtype=pred_scores.dtype)

    total = cls * weights.cls + reg * weights.reg + obj * weights.obj
    return total, cls, reg, obj


def total_loss(
    assignment: AssignmentResult,
    preds: Sequence[tuple[BBox, Sequence[float], float]],
    gts: Sequence[BBox],
    focal: FocalParams,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Combined loss for predictions given as (box, class scores, objectness)."""
    if len(assignment.positive) != len(preds):
        raise ValueError("assignment does not match the number of predictions")
    boxes = Tensor(boxes_to_array([p[0] for p in preds]), dtype=np.float64)
    n_cls = len(preds[0][1]) if preds else len(focal.class_weights)
    scores = Tensor(np.array([list(p[1]) for p in preds], dtype=np.float64).reshape(len(preds), n_cls), dtype=np.float64)
    obj = Tensor(np.array([p[2] for p in preds], dtype=np.float64), dtype=np.float64)
    total, cls, reg, objl = loss_tensors(
        boxes,
        scores,
        obj,
        boxes_to_array(list(gts)),
        np.array([g.class_id for g in gts], dtype=np.int64),
        assignment,
        focal,
        weights,
    )
    return LossBreakdown(
        cls=float(cls.data),
        reg=float(reg.data),
        obj=float(objl.data),
        total=float(total.data),
        lambda_cls=weights.cls,
        lambda_reg=weights.reg,
        lambda_obj=weights.obj,
    )
