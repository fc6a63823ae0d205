"""Box geometry, SIoU regression cost and the task-aligned assigner."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-9


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized center format."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    conf: float | None = None

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive, got w={self.w}, h={self.h}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if self.conf is not None and not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"conf must lie in [0, 1], got {self.conf}")

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float, class_id: int = 0, conf: float | None = None):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, class_id, conf)

    def clamped(self) -> "BBox":
        """Clip to the unit square."""
        x1, y1, x2, y2 = self.xyxy
        if x1 >= 0.0 and y1 >= 0.0 and x2 <= 1.0 and y2 <= 1.0:
            return self
        x1, y1 = max(0.0, x1), max(0.0, y1)
        x2, y2 = min(1.0, x2), min(1.0, y2)
        return BBox.from_xyxy(x1, y1, x2, y2, self.class_id, self.conf)

    def contains(self, x: float, y: float) -> bool:
        x1, y1, x2, y2 = self.xyxy
        return x1 <= x <= x2 and y1 <= y <= y2

    def with_conf(self, conf: float | None) -> "BBox":
        return replace(self, conf=conf)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """(N, 4) float64 array of cx, cy, w, h."""
    if not boxes:
        return np.zeros((0, 4))
    return np.array([(b.cx, b.cy, b.w, b.h) for b in boxes], dtype=np.float64)


def cxcywh_to_xyxy(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    half = a[..., 2:4] / 2
    return np.concatenate([a[..., 0:2] - half, a[..., 0:2] + half], axis=-1)


def iou(a: BBox, b: BBox, mode: Literal["iou", "giou", "diou"] = "iou") -> float:
    """IoU, GIoU or DIoU of two boxes."""
    if a.area <= 0 or b.area <= 0:
        raise ValueError("iou: zero-area box")
    ax1, ay1, ax2, ay2 = a.xyxy
    bx1, by1, bx2, by2 = b.xyxy
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    val = inter / union
    if mode == "iou":
        return val
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    if mode == "giou":
        c_area = cw * ch
        # the enclosing box always covers the union; clamp roundoff
        return val - max(0.0, c_area - union) / c_area
    if mode == "diou":
        rho2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
        return val - rho2 / (cw * cw + ch * ch)
    raise ValueError(f"unknown iou mode {mode!r}")


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N,4) and (M,4) cxcywh arrays."""
    a = cxcywh_to_xyxy(a)
    b = cxcywh_to_xyxy(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


# ---------------------------------------------------------------------------
# SIoU
# ---------------------------------------------------------------------------


def siou_terms(pred: Tensor, gt: Tensor) -> Tensor:
    """Per-row SIoU loss for (N, 4) cxcywh tensors, differentiable in both.

    loss = 1 - IoU + (distance_cost + shape_cost) / 2, with the angle cost
    written as 2*|dx|*|dy| / sigma^2. That is algebraically equal to
    1 - 2*sin^2(arcsin(|dy|/sigma) - pi/4) but has no infinite derivative at
    purely vertical offsets; coincident centers give an angle cost of 0.
    """
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise T.ShapeError(f"siou: expected matching (N, 4) tensors, got {pred.shape} and {gt.shape}")
    pcx, pcy, pw, ph = (pred[:, i] for i in range(4))
    gcx, gcy, gw, gh = (gt[:, i] for i in range(4))

    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2 = gcx - gw * 0.5, gcx + gw * 0.5
    gy1, gy2 = gcy - gh * 0.5, gcy + gh * 0.5

    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou_val = inter / union

    enc_w = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    enc_h = T.maximum(py2, gy2) - T.minimum(py1, gy1)

    dx = gcx - pcx
    dy = gcy - pcy
    sigma2 = dx * dx + dy * dy
    angle = 2.0 * T.absolute(dx) * T.absolute(dy) / T.clamp(sigma2, lo=1e-12)

    rho_x = (dx / enc_w) ** 2
    rho_y = (dy / enc_h) ** 2
    gamma = 2.0 - angle
    distance = (1.0 - T.exp(-(gamma * rho_x))) + (1.0 - T.exp(-(gamma * rho_y)))

    omega_w = T.absolute(pw - gw) / T.maximum(pw, gw)
    omega_h = T.absolute(ph - gh) / T.maximum(ph, gh)
    shape = (1.0 - T.exp(-omega_w)) ** 4 + (1.0 - T.exp(-omega_h)) ** 4

    return 1.0 - iou_val + (distance + shape) * 0.5


def siou_loss(pred: BBox, gt: BBox) -> float:
    """SIoU regression loss between two boxes (0 iff they coincide)."""
    p = Tensor([[pred.cx, pred.cy, pred.w, pred.h]], dtype=np.float64)
    g = Tensor([[gt.cx, gt.cy, gt.w, gt.h]], dtype=np.float64)
    # the IoU term can round a hair above 1 for coincident boxes
    return max(0.0, float(siou_terms(p, g).data[0]))


# ---------------------------------------------------------------------------
# Task-aligned assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentParams:
    """Hyperparameters of the alignment score and top-k selection."""

    gamma: float = 0.5
    alpha_ta: float = 1.0
    beta_ta: float = 6.0
    topk: int = 10
    form: Literal["geometric", "power"] = "power"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.topk < 1:
            raise ValueError(f"topk must be >= 1, got {self.topk}")
        if self.form not in ("geometric", "power"):
            raise ValueError(f"unknown alignment form {self.form!r}")


def alignment_metric(p, iou_val, params: AlignmentParams = AlignmentParams(), form: str | None = None):
    """Alignment score of a classification score and a localization quality.

    ``geometric``: p**gamma * iou**(1 - gamma). ``power``: p**alpha_ta * iou**beta_ta.
    Works on floats or numpy arrays.
    """
    form = form or params.form
    p_arr = np.asarray(p, dtype=np.float64)
    i_arr = np.asarray(iou_val, dtype=np.float64)
    if np.any(p_arr < 0) or np.any(i_arr < 0):
        raise ValueError("alignment_metric: negative inputs")
    if np.any(p_arr > 1) or np.any(i_arr > 1):
        raise ValueError("alignment_metric: inputs must lie in [0, 1]")
    if form == "geometric":
        out = p_arr ** params.gamma * i_arr ** (1.0 - params.gamma)
    elif form == "power":
        out = p_arr ** params.alpha_ta * i_arr ** params.beta_ta
    else:
        raise ValueError(f"unknown alignment form {form!r}")
    return float(out) if out.ndim == 0 else out


@dataclass
class AssignmentResult:
    positive: np.ndarray  # (P,) bool
    matched_gt: np.ndarray  # (P,) int, -1 for negatives
    score: np.ndarray  # (P,) float alignment score, 0 for negatives

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    @classmethod
    def empty(cls, n: int) -> "AssignmentResult":
        return cls(np.zeros(n, dtype=bool), np.full(n, -1, dtype=np.int64), np.zeros(n))


def assign_arrays(
    pred_boxes: np.ndarray,
    pred_scores: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    params: AlignmentParams = AlignmentParams(),
    points: np.ndarray | None = None,
) -> AssignmentResult:
    """Vectorized assigner.

    Args:
        pred_boxes: (P, 4) cxcywh.
        pred_scores: (P, C) class scores in [0, 1].
        gt_boxes: (G, 4) cxcywh.
        gt_classes: (G,) ints.
        points: (P, 2) candidate locations for the center prior; defaults
            to the predicted box centers.
    """
    n_pred = len(pred_boxes)
    result = AssignmentResult.empty(n_pred)
    if n_pred == 0 or len(gt_boxes) == 0:
        return result
    pts = pred_boxes[:, :2] if points is None else np.asarray(points, dtype=np.float64)
    gxyxy = cxcywh_to_xyxy(gt_boxes)
    inside = (
        (pts[None, :, 0] >= gxyxy[:, None, 0])
        & (pts[None, :, 0] <= gxyxy[:, None, 2])
        & (pts[None, :, 1] >= gxyxy[:, None, 1])
        & (pts[None, :, 1] <= gxyxy[:, None, 3])
    )  # (G, P)
    ious = np.clip(pairwise_iou(gt_boxes, pred_boxes), 0.0, 1.0)
    p = np.clip(pred_scores[:, np.asarray(gt_classes, dtype=np.int64)].T, 0.0, 1.0)  # (G, P)
    t = alignment_metric(p, ious, params)
    t = np.asarray(t, dtype=np.float64).reshape(ious.shape)

    best_t = np.full(n_pred, -1.0)
    for g in range(len(gt_boxes)):
        cand = np.flatnonzero(inside[g])
        if cand.size == 0:
            continue
        # stable sort on -t: equal scores keep ascending prediction index
        order = cand[np.argsort(-t[g, cand], kind="stable")][: params.topk]
        for k in order:
            # strict > keeps the earlier (lower-index) gt on equal scores
            if t[g, k] > best_t[k]:
                best_t[k] = t[g, k]
                result.matched_gt[k] = g
    result.positive = result.matched_gt >= 0
    result.score = np.where(result.positive, np.maximum(best_t, 0.0), 0.0)
    return result


def assign(
    preds: Sequence[tuple[BBox, Sequence[float]]],
    gts: Sequence[BBox],
    params: AlignmentParams = AlignmentParams(),
) -> AssignmentResult:
    """Task-aligned assignment of predictions to ground-truth boxes.

    Each gt scores the predictions whose center lies inside it, keeps the
    ``topk`` best, and a prediction claimed by several gts goes to the one
    with the higher score.
    """
    if not preds:
        return AssignmentResult.empty(0)
    boxes = boxes_to_array([b for b, _ in preds])
    scores = np.array([list(s) for _, s in preds], dtype=np.float64)
    if np.any(scores < 0) or np.any(scores > 1):
        raise ValueError("assign: class scores must lie in [0, 1]")
    return assign_arrays(
        boxes,
        scores,
        boxes_to_array(list(gts)),
        np.array([g.class_id for g in gts], dtype=np.int64),
        params,
    )
