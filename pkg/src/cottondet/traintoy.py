"""Desk-scale end-to-end harness: synthetic shapes, a tiny anchor-free detector, training and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .augment import (
    AugSchedule,
    Image,
    adjust_augmentation,
    adjust_mosaic_weights,
    color_jitter,
    derive_seed,
    image_sampling_weights,
    letterbox,
    mixup,
    mosaic,
)
from .blocks import C2PSA, Conv, GhostConv, GroupNorm, GSConv, Module, RepConvBlock
from .boxes import AlignmentParams, AssignmentResult, BBox, assign_arrays, boxes_to_array, pairwise_iou
from .data import DatasetManifest, Entry, split_dataset
from .evaluation import EvalReport, map_summary
from .fusion import make_pyramid_nodes, pyramid_fuse
from .losses import FocalParams, LossBreakdown, LossWeights, calculate_class_weights, loss_tensors
from .tensor import Tensor

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("disk", "square", "ring")


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_images: int = 200
    image_size: int = 128
    classes: tuple[str, ...] = SHAPE_CLASSES
    min_size: float = 0.12
    max_size: float = 0.30
    small_size: float = 0.22  # sides below this cover < 5% of the image
    max_objects: int = 3
    noise: float = 12.0
    seed: int = 0


def _draw_shape(px: np.ndarray, kind: str, cx: float, cy: float, r: float, color: np.ndarray) -> None:
    h, w = px.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    if kind == "disk":
        mask = dx * dx + dy * dy <= r * r
    elif kind == "square":
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif kind == "ring":
        d2 = dx * dx + dy * dy
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    px[mask] = color


def synthetic_image(spec: SyntheticSpec, index: int) -> Image:
    """One image of non-overlapping shapes on a noisy dark background; labels are exact."""
    rng = np.random.default_rng(derive_seed(spec.seed, index, 0))
    s = spec.image_size
    base = rng.uniform(20, 60, size=3)
    px = np.clip(base + rng.normal(0, spec.noise, size=(s, s, 3)), 0, 255).astype(np.uint8)
    n_obj = int(rng.integers(1, spec.max_objects + 1))
    placed: list[tuple[float, float, float, float]] = []
    boxes = []
    for _ in range(n_obj):
        for _attempt in range(20):
            side = rng.uniform(spec.min_size, spec.max_size) * s
            r = side / 2
            cx = rng.uniform(r + 1, s - r - 1)
            cy = rng.uniform(r + 1, s - r - 1)
            cand = (cx - r, cy - r, cx + r, cy + r)
            if all(cand[2] + 2 <= p[0] or p[2] + 2 <= cand[0] or cand[3] + 2 <= p[1] or p[3] + 2 <= cand[1] for p in placed):
                break
        else:
            continue
        cls = int(rng.integers(len(spec.classes)))
        color = rng.uniform(140, 255, size=3).astype(np.uint8)
        _draw_shape(px, spec.classes[cls], cx, cy, r, color)
        placed.append(cand)
        boxes.append(BBox(cx / s, cy / s, side / s, side / s, cls))
    return Image(px, boxes)


def generate_synthetic(spec: SyntheticSpec) -> list[Image]:
    return [synthetic_image(spec, i) for i in range(spec.n_images)]


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    base_lr: float = 0.01
    min_lr: float = 0.0005
    warmup_epochs: int = 3
    img_size_start: int = 320
    img_size_end: int = 640
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.937
    weight_decay: float = 5e-4
    grad_clip: float = 10.0
    augmentation: AugSchedule = field(default_factory=AugSchedule)
    boosted_classes: tuple[int, ...] = ()
    mosaic_boost: float = 1.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    focal_gamma: float = 2.0
    dynamic_class_weights: bool = True
    assigner: AlignmentParams = field(default_factory=AlignmentParams)
    use_c2psa: bool = True
    width: tuple[int, int, int] = (8, 16, 32)
    conf_threshold: float = 0.001
    nms_iou: float = 0.6

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        for name in ("img_size_start", "img_size_end"):
            if getattr(self, name) % 32:
                raise ValueError(f"{name} must be a multiple of 32, got {getattr(self, name)}")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset calibrated on synthetic shapes (seed 0, single CPU core, about 2.5 min).

        Image sizes are shrunk 5x (64 -> 128). The classification and objectness
        losses average over every anchor, so their weights are raised to give
        plain SGD a usable signal in 40 epochs.
        """
        params = dict(
            epochs=40,
            base_lr=0.01,
            min_lr=0.0005,
            batch_size=4,
            grad_clip=100.0,
            loss_weights=LossWeights(cls=100.0, reg=7.5, obj=10.0),
            img_size_start=64,
            img_size_end=128,
            augmentation=AugSchedule(p_mosaic0=0.5, p_mixup0=0.15, decay_start_frac=0.8, mosaic_grid=4),
            boosted_classes=(2,),
            mosaic_boost=1.5,
        )
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"]["class_boost"] = {str(k): v for k, v in d["augmentation"]["class_boost"].items()}
        return d


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_epochs`` then cosine annealing to ``min_lr`` at the last epoch."""
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.base_lr * (epoch + 1) / w
    span = cfg.epochs - 1 - w
    frac = 1.0 if span <= 0 else (epoch - w) / span
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def progressive_size(epoch: int, cfg: TrainConfig) -> int:
    """Linear ramp from img_size_start to img_size_end over the first half, snapped to multiples of 32."""
    half = cfg.epochs / 2
    if half <= 0 or epoch >= half:
        return cfg.img_size_end
    raw = cfg.img_size_start + (cfg.img_size_end - cfg.img_size_start) * epoch / half
    return int(32 * math.floor(raw / 32 + 0.5))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class ToyDetector(Module):
    """GSConv/RepConv backbone (strides 2/4/8), optional C2PSA, fused 2-level neck, decoupled head."""

    kind = "toy_detector"
    strides = (4, 8)

    def __init__(self, n_classes: int, width: Sequence[int] = (8, 16, 32), use_c2psa: bool = True, seed: int = 0):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = width
        self.n_classes = n_classes
        self.width = tuple(width)
        self.use_c2psa = use_c2psa
        self.stem = GSConv(3, c1, stride=2, rng=rng)
        self.rep1 = RepConvBlock(c1, c1, rng=rng)
        self.down2 = GSConv(c1, c2, stride=2, rng=rng)
        self.rep2 = RepConvBlock(c2, c2, rng=rng)
        self.down3 = GSConv(c2, c3, stride=2, rng=rng)
        self.rep3 = RepConvBlock(c3, c3, rng=rng)
        # normalization sits outside the RepConv blocks so merging stays exact
        self.norms = [_norm(c) for c in (c1, c1, c2, c2, c3, c3)]
        self.attn = C2PSA(c3, reduction=4, spatial_kernel=7, rng=rng) if use_c2psa else None
        self.lateral = GhostConv(c3, c2, primary_ratio=0.5, rng=rng)
        self.fusion = make_pyramid_nodes(c2, 2)
        self.cls_stem = Conv(c2, c2, k=3, rng=rng)
        self.cls_norm = _norm(c2)
        self.cls_out = Conv(c2, n_classes, k=1, rng=rng)
        self.reg_stem = Conv(c2, c2, k=3, rng=rng)
        self.reg_norm = _norm(c2)
        self.reg_out = Conv(c2, 5, k=1, rng=rng)
        prior = -math.log((1 - 0.01) / 0.01)
        self.cls_out.bias.data[:] = prior
        self.reg_out.bias.data[4] = prior
        for conv in (self.cls_out, self.reg_out):
            conv.weight.data *= 0.1
        self.mode = "train"

    def hyperparameters(self) -> dict:
        return {"n_classes": self.n_classes, "width": list(self.width), "use_c2psa": self.use_c2psa}

    def rep_blocks(self) -> list[RepConvBlock]:
        return [self.rep1, self.rep2, self.rep3]

    def merge_reparam(self) -> None:
        for b in self.rep_blocks():
            b.merge()
        self.mode = "merged"

    def features(self, x: Tensor) -> list[Tensor]:
        n = self.norms
        x = silu(n[0](self.stem(x)))
        x = silu(n[1](self.rep1(x, self.mode)))
        p2 = silu(n[2](self.down2(x)))
        p2 = silu(n[3](self.rep2(p2, self.mode)))
        p3 = silu(n[4](self.down3(p2)))
        p3 = silu(n[5](self.rep3(p3, self.mode)))
        if self.attn is not None:
            p3 = self.attn(p3)
        coarse, fine = pyramid_fuse([self.lateral(p3), p2], self.fusion)
        return [fine, coarse]  # strides 4, 8

    def __call__(self, x: Tensor) -> list[tuple[Tensor, Tensor, Tensor]]:
        """Per level: (class logits (N,C,H,W), box distances (N,4,H,W), objectness logit (N,1,H,W))."""
        outs = []
        for f in self.features(x):
            cls = self.cls_out(silu(self.cls_norm(self.cls_stem(f))))
            reg = self.reg_out(silu(self.reg_norm(self.reg_stem(f))))
            outs.append((cls, reg[:, 0:4], reg[:, 4:5]))
        return outs


def _norm(channels: int) -> GroupNorm:
    return GroupNorm(channels, max(1, channels // 8))


def silu(x: Tensor) -> Tensor:
    return x * T.sigmoid(x)


def _to_anchor_major(t: Tensor) -> Tensor:
    n, c, h, w = t.shape
    return T.reshape(T.transpose(t, (0, 2, 3, 1)), (n, h * w, c))


def anchor_grid(size: int, strides: Sequence[int] = ToyDetector.strides) -> tuple[np.ndarray, np.ndarray]:
    """Normalized anchor points (A, 2) and per-anchor box-distance scale (A,)."""
    pts, scales = [], []
    for s in strides:
        g = size // s
        ys, xs = np.mgrid[0:g, 0:g]
        pts.append(np.stack([(xs.ravel() + 0.5) * s / size, (ys.ravel() + 0.5) * s / size], axis=1))
        scales.append(np.full(g * g, 8.0 * s / size))
    return np.concatenate(pts), np.concatenate(scales)


def decode(outputs: list[tuple[Tensor, Tensor, Tensor]], size: int) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
    """Flatten levels into (N, A, 4) normalized cxcywh boxes, (N, A, C) class probs, (N, A) objectness."""
    cls = T.concat([_to_anchor_major(c) for c, _, _ in outputs], axis=1)
    reg = T.concat([_to_anchor_major(r) for _, r, _ in outputs], axis=1)
    obj = T.concat([_to_anchor_major(o) for _, _, o in outputs], axis=1)
    n, a, _ = reg.shape
    points, scales = anchor_grid(size)
    if len(points) != a:
        raise T.ShapeError(f"decode: {a} anchors in outputs but {len(points)} expected for size {size}")
    dist = T.sigmoid(reg) * Tensor(np.broadcast_to(scales[None, :, None], (n, a, 4)), dtype=reg.dtype)
    left, top, right, bottom = (dist[:, :, k] for k in range(4))
    px = Tensor(np.broadcast_to(points[None, :, 0], (n, a)), dtype=reg.dtype)
    py = Tensor(np.broadcast_to(points[None, :, 1], (n, a)), dtype=reg.dtype)
    cx = px + (right - left) * 0.5
    cy = py + (bottom - top) * 0.5
    boxes = T.stack([cx, cy, left + right, top + bottom], axis=2)
    return boxes, T.sigmoid(cls), T.sigmoid(T.reshape(obj, (n, a))), points


def raw_logits(model: ToyDetector, x: Tensor) -> np.ndarray:
    """All head outputs concatenated, for train/merged equivalence checks."""
    parts = []
    for cls, reg, obj in model(x):
        parts += [cls.data.ravel(), reg.data.ravel(), obj.data.ravel()]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list[int]:
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(i)
        if not order:
            break
        ious = pairwise_iou(boxes[i : i + 1], boxes[order])[0]
        order = [j for j, v in zip(order, ious) if v <= iou_thr]
    return keep


def images_to_batch(images: Sequence[Image]) -> Tensor:
    arr = np.stack([im.pixels for im in images]).astype(np.float32) / 255.0
    return Tensor(arr.transpose(0, 3, 1, 2))


def predict(
    model: ToyDetector,
    images: Sequence[Image],
    size: int,
    conf_threshold: float = 0.001,
    nms_iou: float = 0.6,
    max_det: int = 100,
    batch_size: int = 16,
) -> list[list[BBox]]:
    """Letterbox to ``size``, run the model, apply class-wise NMS; boxes are in letterboxed coordinates."""
    out: list[list[BBox]] = []
    for start in range(0, len(images), batch_size):
        chunk = [letterbox(im, size) for im in images[start : start + batch_size]]
        boxes, cls, obj, _ = decode(model(images_to_batch(chunk)), size)
        for b, c, o in zip(boxes.data, cls.data, obj.data):
            scores = c * o[:, None]
            dets = []
            for k in range(scores.shape[1]):
                keep_mask = scores[:, k] >= conf_threshold
                if not keep_mask.any():
                    continue
                idx = np.flatnonzero(keep_mask)
                for j in nms(b[idx].astype(np.float64), scores[idx, k].astype(np.float64), nms_iou):
                    bx = b[idx[j]].astype(np.float64)
                    x1, y1 = max(0.0, bx[0] - bx[2] / 2), max(0.0, bx[1] - bx[3] / 2)
                    x2, y2 = min(1.0, bx[0] + bx[2] / 2), min(1.0, bx[1] + bx[3] / 2)
                    if x2 <= x1 or y2 <= y1:
                        continue
                    dets.append(BBox.from_xyxy(x1, y1, x2, y2, k, float(min(1.0, scores[idx[j], k]))))
            dets.sort(key=lambda d: -d.conf)
            out.append(dets[:max_det])
    return out


def evaluate(model: ToyDetector, images: Sequence[Image], size: int, class_names: Sequence[str], cfg: TrainConfig | None = None) -> EvalReport:
    cfg = cfg or TrainConfig.toy()
    preds = predict(model, images, size, cfg.conf_threshold, cfg.nms_iou)
    dets = {f"{i:05d}": p for i, p in enumerate(preds)}
    gts = {f"{i:05d}": letterbox(im, size).annotations for i, im in enumerate(images)}
    return map_summary(dets, gts, class_names)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class SGD:
    """SGD with momentum and decoupled-from-bias weight decay."""

    def __init__(self, named_params: list[tuple[str, Tensor]], momentum: float, weight_decay: float):
        self.params = named_params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self, lr: float, grad_clip: float | None = None) -> float:
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in self.params}
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        factor = grad_clip / norm if grad_clip and norm > grad_clip else 1.0
        for name, p in self.params:
            g = grads[name] * factor
            if p.ndim == 4:  # conv weights only
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)
            p.grad = None
        return norm


@dataclass
class TrainResult:
    model: ToyDetector
    log: list[dict]
    report: EvalReport
    heldout: list[Image]
    config: TrainConfig
    class_names: list[str]
    checkpoint: Path | None = None
    seconds: float = 0.0

    @property
    def final_loss(self) -> float | None:
        return self.log[-1]["total"] if self.log else None


def _split_synthetic(images: Sequence[Image], class_names: Sequence[str], seed: int) -> tuple[list[int], list[int]]:
    entries = [Entry(f"images/{i:05d}.png", f"labels/{i:05d}.txt") for i in range(len(images))]
    manifest = DatasetManifest(Path("."), list(class_names), entries)
    labels = {e.image: im.annotations for e, im in zip(entries, images)}
    split_dataset(manifest, (0.8, 0.1, 0.1), seed, labels=labels)
    train = [i for i, e in enumerate(manifest.entries) if e.split == "train"]
    held = [i for i, e in enumerate(manifest.entries) if e.split != "train"]
    return train, held


def _training_sample(
    k: int,
    order: np.ndarray,
    images: Sequence[Image],
    draw_p: np.ndarray,
    size: int,
    p_mosaic: float,
    p_mixup: float,
    cfg: TrainConfig,
    epoch: int,
) -> Image:
    idx = int(order[k])
    rng = np.random.default_rng(derive_seed(cfg.seed, idx, epoch + 1))

    def one(i: int, r: np.random.Generator) -> Image:
        if r.random() < p_mosaic:
            n_extra = cfg.augmentation.mosaic_grid - 1
            others = r.choice(len(images), size=n_extra, p=draw_p)
            srcs = [images[i]] + [images[int(j)] for j in others]
            return mosaic(srcs, int(r.integers(2**31)), target=size)
        return letterbox(images[i], size)

    img = one(idx, rng)
    if rng.random() < p_mixup:
        other = one(int(rng.choice(len(images), p=draw_p)), rng)
        img = mixup(img, other, float(rng.beta(32.0, 32.0)))
    if rng.random() < 0.5:
        img = Image(np.ascontiguousarray(img.pixels[:, ::-1]), [BBox(1.0 - b.cx, b.cy, b.w, b.h, b.class_id) for b in img.annotations])
    return color_jitter(img, int(rng.integers(2**31)))


def train_step(
    model: ToyDetector,
    batch: Sequence[Image],
    size: int,
    focal: FocalParams,
    cfg: TrainConfig,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Forward, assign and loss for one batch; returns differentiable (total, cls, reg, obj)."""
    x = images_to_batch(batch)
    boxes, cls, obj, points = decode(model(x), size)
    n, a, c = cls.shape
    pos = np.zeros(n * a, dtype=bool)
    matched = np.full(n * a, -1, dtype=np.int64)
    score = np.zeros(n * a)
    gt_boxes, gt_classes = [], []
    offset = 0
    for i, img in enumerate(batch):
        g = boxes_to_array(img.annotations)
        gc = np.array([b.class_id for b in img.annotations], dtype=np.int64)
        res = assign_arrays(boxes.data[i].astype(np.float64), cls.data[i].astype(np.float64), g, gc, cfg.assigner, points)
        sl = slice(i * a, (i + 1) * a)
        pos[sl] = res.positive
        matched[sl] = np.where(res.positive, res.matched_gt + offset, -1)
        score[sl] = res.score
        gt_boxes.append(g)
        gt_classes.append(gc)
        offset += len(g)
    assignment = AssignmentResult(pos, matched, score)
    return loss_tensors(
        T.reshape(boxes, (n * a, 4)),
        T.reshape(cls, (n * a, c)),
        T.reshape(obj, (n * a,)),
        np.concatenate(gt_boxes) if offset else np.zeros((0, 4)),
        np.concatenate(gt_classes) if offset else np.zeros(0, dtype=np.int64),
        assignment,
        focal,
        cfg.loss_weights,
    )


def train(
    cfg: TrainConfig | None = None,
    spec: SyntheticSpec | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train the toy detector on synthetic shapes and evaluate on the held-out split."""
    cfg = cfg or TrainConfig.toy()
    spec = spec or SyntheticSpec(seed=cfg.seed)
    t0 = time.perf_counter()
    class_names = list(spec.classes)
    images = generate_synthetic(spec)
    train_idx, held_idx = _split_synthetic(images, class_names, cfg.seed)
    train_imgs = [images[i] for i in train_idx]
    heldout = [images[i] for i in held_idx]

    counts = [0] * len(class_names)
    for im in train_imgs:
        for b in im.annotations:
            counts[b.class_id] += 1
    if cfg.dynamic_class_weights and sum(counts):
        focal = FocalParams(cfg.focal_gamma, calculate_class_weights(counts))
    else:
        focal = FocalParams.uniform(len(class_names), cfg.focal_gamma)
    mosaic_w = adjust_mosaic_weights(counts, cfg.boosted_classes, cfg.mosaic_boost) if sum(counts) else [1.0] * len(class_names)
    draw_p = image_sampling_weights([[b.class_id for b in im.annotations] for im in train_imgs], mosaic_w)

    model = ToyDetector(len(class_names), cfg.width, cfg.use_c2psa, seed=cfg.seed)
    opt = SGD(list(model.named_parameters()), cfg.momentum, cfg.weight_decay)
    log: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        size = progressive_size(epoch, cfg)
        p_mosaic, p_mixup = adjust_augmentation(epoch, cfg.epochs, cfg.augmentation)
        order = np.random.default_rng(derive_seed(cfg.seed, 0, epoch + 1)).permutation(len(train_imgs))
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [
                _training_sample(k, order, train_imgs, draw_p, size, p_mosaic, p_mixup, cfg, epoch)
                for k in range(start, min(start + cfg.batch_size, len(order)))
            ]
            total, cls_l, reg_l, obj_l = train_step(model, batch, size, focal, cfg)
            vals = np.array([float(v.data) for v in (total, cls_l, reg_l, obj_l)])
            if not np.all(np.isfinite(vals)):
                dump = _dump_batch(out_path, epoch, start, batch, vals)
                raise TrainingDiverged(f"non-finite loss {vals.tolist()} at epoch {epoch}, batch offset {start}; dump: {dump}")
            total.backward()
            opt.step(lr, cfg.grad_clip)
            sums += vals
            n_batches += 1
        mean = sums / max(n_batches, 1)
        lw = cfg.loss_weights
        # recombined from the component means so the logged breakdown adds up exactly
        mean[0] = lw.cls * mean[1] + lw.reg * mean[2] + lw.obj * mean[3]
        entry = LossBreakdown(
            cls=float(mean[1]),
            reg=float(mean[2]),
            obj=float(mean[3]),
            total=float(mean[0]),
            lambda_cls=cfg.loss_weights.cls,
            lambda_reg=cfg.loss_weights.reg,
            lambda_obj=cfg.loss_weights.obj,
        ).to_dict()
        entry.update(epoch=epoch, lr=lr, img_size=size, p_mosaic=p_mosaic, p_mixup=p_mixup)
        log.append(entry)
        logger.info("epoch %d size %d lr %.4f loss %.4f (cls %.4f reg %.4f obj %.4f)", epoch, size, lr, *mean[[0, 1, 2, 3]])

    report = evaluate(model, heldout, cfg.img_size_end, class_names, cfg)
    result = TrainResult(model, log, report, heldout, cfg, class_names, seconds=time.perf_counter() - t0)
    if out_path is not None:
        result.checkpoint = save_checkpoint(model, cfg, out_path / "checkpoint")
        (out_path / "log.jsonl").write_text("".join(json.dumps(e) + "\n" for e in log))
        (out_path / "report.txt").write_text(report.to_text())
        (out_path / "report.json").write_text(report.to_json())
    return result


def _dump_batch(out_path: Path | None, epoch: int, start: int, batch: Sequence[Image], vals: np.ndarray) -> str:
    if out_path is None:
        return "<no output directory>"
    path = out_path / f"diverged_epoch{epoch}_batch{start}.npz"
    np.savez(
        path,
        pixels=np.stack([im.pixels for im in batch]),
        boxes=np.array([[i, b.class_id, b.cx, b.cy, b.w, b.h] for i, im in enumerate(batch) for b in im.annotations]),
        losses=vals,
    )
    return str(path)


def save_checkpoint(model: ToyDetector, cfg: TrainConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    model.save(directory)
    desc = json.loads((directory / "descriptor.json").read_text())
    desc["config"] = cfg.to_dict()
    (directory / "descriptor.json").write_text(json.dumps(desc, indent=2))
    return directory


def load_checkpoint(directory: str | Path) -> ToyDetector:
    directory = Path(directory)
    desc = json.loads((directory / "descriptor.json").read_text())
    hp = desc["hyperparameters"]
    model = ToyDetector(hp["n_classes"], hp["width"], hp["use_c2psa"])
    model.load_parameters(directory)
    return model
