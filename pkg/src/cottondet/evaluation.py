"""Detection metrics: AP50, AP50-95, F1-optimal P/R, confusion matrix and reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import BBox, boxes_to_array, pairwise_iou

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
# k / 100 rounds exactly like recall = tp / n_gt, so equal rationals compare equal
RECALL_GRID = np.arange(101) / 100

Detections = Mapping[str, Sequence[BBox]]


@dataclass
class ClassMatches:
    """Detections of one class in descending-confidence order."""

    confs: np.ndarray
    tp: np.ndarray  # (D,) bool at a single IoU threshold
    n_gt: int


def _sorted_class_dets(dets: Detections, images: Sequence[str], cls: int) -> list[tuple[float, str, int]]:
    items = []
    for image in images:
        for k, d in enumerate(dets.get(image, ())):
            if d.class_id == cls:
                items.append((float(d.conf if d.conf is not None else 1.0), image, k))
    # stable on (-conf): equal confidences keep image order, then box order
    items.sort(key=lambda t: -t[0])
    return items


def _match_class(
    dets: Detections, gts: Detections, images: Sequence[str], cls: int, thresholds: Sequence[float]
) -> tuple[np.ndarray, np.ndarray, int]:
    """Returns (confs (D,), tp (T, D), n_gt) for one class at several IoU thresholds."""
    order = _sorted_class_dets(dets, images, cls)
    gt_idx = {img: [k for k, g in enumerate(gts.get(img, ())) if g.class_id == cls] for img in images}
    n_gt = sum(len(v) for v in gt_idx.values())
    ious: dict[str, np.ndarray] = {}
    for img in images:
        det_ids = [k for k, d in enumerate(dets.get(img, ())) if d.class_id == cls]
        if det_ids and gt_idx[img]:
            m = pairwise_iou(
                boxes_to_array([dets[img][k] for k in det_ids]), boxes_to_array([gts[img][k] for k in gt_idx[img]])
            )
            ious[img] = {k: m[r] for r, k in enumerate(det_ids)}  # type: ignore[assignment]
    tp = np.zeros((len(thresholds), len(order)), dtype=bool)
    for t, thr in enumerate(thresholds):
        used = {img: np.zeros(len(gt_idx[img]), dtype=bool) for img in images}
        for d, (_, img, k) in enumerate(order):
            row = ious.get(img)
            if row is None:
                continue
            cand = np.where(used[img], -1.0, row[k])
            j = int(np.argmax(cand))
            if cand[j] >= thr:
                used[img][j] = True
                tp[t, d] = True
    confs = np.array([c for c, _, _ in order], dtype=np.float64)
    return confs, tp, n_gt


def _images(dets: Detections, gts: Detections) -> list[str]:
    return sorted(set(gts) | set(dets))


def _classes(dets: Detections, gts: Detections) -> list[int]:
    ids = {b.class_id for v in gts.values() for b in v} | {b.class_id for v in dets.values() for b in v}
    return sorted(ids)


def match_detections(dets: Detections, gts: Detections, iou_thr: float = 0.5) -> dict[int, ClassMatches]:
    """Greedy TP/FP labelling per class.

    Detections are visited by descending confidence; each takes the unmatched
    same-class gt of highest IoU if that IoU is >= ``iou_thr``.
    """
    images = _images(dets, gts)
    out = {}
    for cls in _classes(dets, gts):
        confs, tp, n_gt = _match_class(dets, gts, images, cls, [iou_thr])
        out[cls] = ClassMatches(confs, tp[0], n_gt)
    return out


def _pr_at_thresholds(tp: np.ndarray, confs: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision/recall after each distinct confidence level (all dets with conf >= level)."""
    order = np.argsort(-confs, kind="stable")
    tp = np.asarray(tp, dtype=bool)[order]
    confs = np.asarray(confs, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    last_of_level = np.r_[confs[1:] != confs[:-1], True] if len(confs) else np.zeros(0, dtype=bool)
    ctp, cfp, levels = ctp[last_of_level], cfp[last_of_level], confs[last_of_level]
    recall = ctp / n_gt if n_gt else np.zeros(len(ctp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return precision, recall, levels


def average_precision(tp_flags: Sequence[bool], confs: Sequence[float], n_gt: int) -> float | None:
    """101-point interpolated AP.

    Returns None when there is nothing to score (no gts, no detections) and
    0.0 for detections without any gt.
    """
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    confs = np.asarray(confs, dtype=np.float64)
    if n_gt == 0:
        return None if len(confs) == 0 else 0.0
    if len(confs) == 0:
        return 0.0
    precision, recall, _ = _pr_at_thresholds(np.asarray(tp_flags), confs, n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _f1_operating_point(tp: np.ndarray, confs: np.ndarray, n_gt: int) -> tuple[float, float]:
    if len(confs) == 0 or n_gt == 0:
        return 0.0, 0.0
    precision, recall, _ = _pr_at_thresholds(tp, confs, n_gt)
    f1 = np.where(precision + recall > 0, 2 * precision * recall / np.maximum(precision + recall, 1e-300), 0.0)
    best = int(np.argmax(f1))  # first maximum = highest confidence
    return float(precision[best]), float(recall[best])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ClassRow:
    name: str
    images: int
    instances: int
    precision: float
    recall: float
    ap50: float
    ap50_95: float


@dataclass
class EvalReport:
    rows: list[ClassRow]
    all: ClassRow
    confusion: list[list[int]] | None = None
    class_names: list[str] = field(default_factory=list)

    @property
    def map50(self) -> float:
        return self.all.ap50

    @property
    def map50_95(self) -> float:
        return self.all.ap50_95

    def to_text(self) -> str:
        """Fixed-width table: Class Images Instances Box(P R mAP50 mAP50-95)."""
        head = ("%22s" + "%11s" * 6) % ("Class", "Images", "Instances", "Box(P", "R", "mAP50", "mAP50-95)")
        fmt = "%22s" + "%11i" * 2 + "%11.3g" * 4
        lines = [head]
        for r in [self.all] + self.rows:
            lines.append(fmt % (r.name, r.images, r.instances, r.precision, r.recall, r.ap50, r.ap50_95))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "images", "instances", "precision", "recall", "map50", "map50_95"])
        for r in [self.all] + self.rows:
            w.writerow([r.name, r.images, r.instances, repr(r.precision), repr(r.recall), repr(r.ap50), repr(r.ap50_95)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "all": asdict(self.all),
            "classes": [asdict(r) for r in self.rows],
            "confusion": self.confusion,
            "class_names": list(self.class_names),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            rows=[ClassRow(**r) for r in d["classes"]],
            all=ClassRow(**d["all"]),
            confusion=d.get("confusion"),
            class_names=list(d.get("class_names", [])),
        )


def map_summary(
    dets: Detections,
    gts: Detections,
    class_names: Sequence[str] | None = None,
    with_confusion: bool = True,
) -> EvalReport:
    """Per-class and aggregate metrics.

    AP50 uses IoU 0.50; AP50-95 averages the ten thresholds 0.50:0.05:0.95.
    P and R are read at the F1-maximizing confidence. Classes with neither
    gts nor detections are omitted; the aggregate row averages the others.
    """
    images = _images(dets, gts)
    present = _classes(dets, gts)
    n_cls = len(class_names) if class_names is not None else (max(present) + 1 if present else 0)
    names = list(class_names) if class_names is not None else [str(i) for i in range(n_cls)]
    rows = []
    for cls in present:
        confs, tp, n_gt = _match_class(dets, gts, images, cls, IOU_THRESHOLDS)
        aps = [average_precision(tp[t], confs, n_gt) for t in range(len(IOU_THRESHOLDS))]
        ap50 = aps[0] or 0.0
        ap5095 = float(np.mean([a or 0.0 for a in aps]))
        p, r = _f1_operating_point(tp[0], confs, n_gt)
        n_img = sum(1 for img in images if any(g.class_id == cls for g in gts.get(img, ())))
        name = names[cls] if cls < len(names) else str(cls)
        rows.append(ClassRow(name, n_img, n_gt, p, r, ap50, ap5095))
    if rows:
        agg = ClassRow(
            "all",
            len(images),
            sum(r.instances for r in rows),
            float(np.mean([r.precision for r in rows])),
            float(np.mean([r.recall for r in rows])),
            float(np.mean([r.ap50 for r in rows])),
            float(np.mean([r.ap50_95 for r in rows])),
        )
    else:
        agg = ClassRow("all", len(images), 0, 0.0, 0.0, 0.0, 0.0)
    confusion = confusion_matrix(dets, gts, max(n_cls, 1)).tolist() if with_confusion else None
    return EvalReport(rows, agg, confusion, names)


def confusion_matrix(
    dets: Detections, gts: Detections, n_classes: int, iou_thr: float = 0.45, conf_thr: float = 0.25
) -> np.ndarray:
    """(C+1) x (C+1) counts; rows are predicted class, columns true class, index C is background."""
    m = np.zeros((n_classes + 1, n_classes + 1), dtype=np.int64)
    bg = n_classes
    for img in _images(dets, gts):
        d = [b for b in dets.get(img, ()) if (b.conf if b.conf is not None else 1.0) >= conf_thr]
        g = list(gts.get(img, ()))
        pairs = []
        if d and g:
            ious = pairwise_iou(boxes_to_array(d), boxes_to_array(g))
            pairs = [(ious[i, j], i, j) for i in range(len(d)) for j in range(len(g)) if ious[i, j] >= iou_thr]
            pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
        used_d, used_g = set(), set()
        for _, i, j in pairs:
            if i in used_d or j in used_g:
                continue
            used_d.add(i)
            used_g.add(j)
            m[d[i].class_id, g[j].class_id] += 1
        for j in range(len(g)):
            if j not in used_g:
                m[bg, g[j].class_id] += 1
        for i in range(len(d)):
            if i not in used_d:
                m[d[i].class_id, bg] += 1
    return m


def comparison_table(reports: Mapping[str, EvalReport]) -> str:
    """Model / mAP50 / mAP50-95 table."""
    width = max([len("Model")] + [len(k) for k in reports]) + 2
    lines = [f"{'Model':<{width}}{'mAP50':>10}{'mAP50-95':>10}"]
    for name, rep in reports.items():
        lines.append(f"{name:<{width}}{rep.map50:>10.3f}{rep.map50_95:>10.3f}")
    return "\n".join(lines) + "\n"


def per_class_csv(reports: Mapping[str, EvalReport]) -> str:
    """Long-format class -> (model, AP50, AP50-95) rows for bar charts."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "model", "map50", "map50_95"])
    for name, rep in reports.items():
        for r in rep.rows:
            w.writerow([r.name, name, f"{r.ap50:.6f}", f"{r.ap50_95:.6f}"])
    return buf.getvalue()
