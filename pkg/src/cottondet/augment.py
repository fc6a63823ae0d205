"""Image-level augmentation: letterbox, Mosaic-4/9, MixUp, HSV jitter and schedules.

Every random op takes an explicit seed. Per-image seeds come from
:func:`derive_seed` so a parallel pipeline reproduces a serial one exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .boxes import BBox
from .losses import calculate_class_weights

PAD_VALUE = 114
MIN_KEEP_FRACTION = 0.10


@dataclass
class Image:
    """RGB uint8 pixels (H, W, 3) with normalized annotations."""

    pixels: np.ndarray
    annotations: list[BBox] = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 3) uint8 pixels, got {self.pixels.shape} {self.pixels.dtype}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def solid(cls, width: int, height: int, color=(PAD_VALUE,) * 3, annotations=None) -> "Image":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = np.asarray(color, dtype=np.uint8)
        return cls(px, list(annotations or []))

    def copy(self) -> "Image":
        return Image(self.pixels.copy(), list(self.annotations))


def derive_seed(global_seed: int, image_index: int, epoch: int = 0) -> int:
    """Stable per-image seed; independent of processing order."""
    return int(np.random.SeedSequence([global_seed, image_index, epoch]).generate_state(1)[0])


def read_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(pixels: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(pixels, mode="RGB").save(path, format="PNG")


def _resize(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    if pixels.shape[1] == width and pixels.shape[0] == height:
        return pixels.copy()
    im = PILImage.fromarray(pixels, mode="RGB").resize((width, height), PILImage.BILINEAR)
    return np.asarray(im, dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# Letterbox
# ---------------------------------------------------------------------------


def letterbox_geometry(w: int, h: int, tw: int, th: int) -> tuple[int, int, int, int]:
    """(content_w, content_h, pad_x, pad_y) for fitting w x h into tw x th."""
    s = min(tw / w, th / h)
    nw = min(tw, max(1, int(round(w * s))))
    nh = min(th, max(1, int(round(h * s))))
    return nw, nh, (tw - nw) // 2, (th - nh) // 2


def letterbox(img: Image, target: int | tuple[int, int] = 640) -> Image:
    """Aspect-preserving bilinear resize into a gray-padded ``target`` canvas."""
    tw, th = (target, target) if isinstance(target, int) else target
    nw, nh, pad_x, pad_y = letterbox_geometry(img.width, img.height, tw, th)
    canvas = np.full((th, tw, 3), PAD_VALUE, dtype=np.uint8)
    canvas[pad_y : pad_y + nh, pad_x : pad_x + nw] = _resize(img.pixels, nw, nh)
    boxes = []
    for b in img.annotations:
        boxes.append(
            BBox(
                (b.cx * nw + pad_x) / tw,
                (b.cy * nh + pad_y) / th,
                b.w * nw / tw,
                b.h * nh / th,
                b.class_id,
                b.conf,
            ).clamped()
        )
    return Image(canvas, boxes)


# ---------------------------------------------------------------------------
# Mosaic / MixUp
# ---------------------------------------------------------------------------


def _clip_box_px(x1, y1, x2, y2, w, h):
    return max(0.0, x1), max(0.0, y1), min(float(w), x2), min(float(h), y2)


def _place(canvas: np.ndarray, tile: Image, x0: int, y0: int, out_boxes: list[BBox]) -> None:
    """Paste ``tile`` with its top-left corner at (x0, y0), cropping to the canvas."""
    ch, cw = canvas.shape[:2]
    th, tw = tile.height, tile.width
    cx1, cy1 = max(0, x0), max(0, y0)
    cx2, cy2 = min(cw, x0 + tw), min(ch, y0 + th)
    if cx2 > cx1 and cy2 > cy1:
        canvas[cy1:cy2, cx1:cx2] = tile.pixels[cy1 - y0 : cy2 - y0, cx1 - x0 : cx2 - x0]
    for b in tile.annotations:
        bx1, by1, bx2, by2 = b.xyxy
        x1, y1 = bx1 * tw + x0, by1 * th + y0
        x2, y2 = bx2 * tw + x0, by2 * th + y0
        full = (x2 - x1) * (y2 - y1)
        k1, l1, k2, l2 = _clip_box_px(x1, y1, x2, y2, cw, ch)
        if k2 <= k1 or l2 <= l1:
            continue
        if (k2 - k1) * (l2 - l1) < MIN_KEEP_FRACTION * full:
            continue
        out_boxes.append(BBox.from_xyxy(k1 / cw, l1 / ch, k2 / cw, l2 / ch, b.class_id, b.conf))


def mosaic(
    imgs: Sequence[Image],
    seed: int,
    target: int = 640,
    center: tuple[int, int] | None = None,
) -> Image:
    """Stitch 4 images (jittered 2x2) or 9 images (equal 3x3 cells) into one canvas.

    Mosaic-4 letterboxes each source into a target/2 square tile and places the
    tiles around a center drawn uniformly from the middle half of the canvas;
    boxes are clipped to the canvas and dropped below 10% of their area.
    """
    n = len(imgs)
    if n not in (4, 9):
        raise ValueError(f"mosaic needs 4 or 9 images, got {n}")
    canvas = np.full((target, target, 3), PAD_VALUE, dtype=np.uint8)
    boxes: list[BBox] = []
    if n == 4:
        rng = np.random.default_rng(seed)
        if center is None:
            lo, hi = target // 4, (3 * target) // 4
            xc, yc = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        else:
            xc, yc = center
        s = target // 2
        origins = [(xc - s, yc - s), (xc, yc - s), (xc - s, yc), (xc, yc)]
        for img, (x0, y0) in zip(imgs, origins):
            _place(canvas, letterbox(img, s), x0, y0, boxes)
    else:
        edges = [0, target // 3, (2 * target) // 3, target]
        for k, img in enumerate(imgs):
            r, c = divmod(k, 3)
            x0, y0 = edges[c], edges[r]
            cell = letterbox(img, (edges[c + 1] - x0, edges[r + 1] - y0))
            _place(canvas, cell, x0, y0, boxes)
    return Image(canvas, boxes)


def mixup(a: Image, b: Image, lam: float) -> Image:
    """Blend pixels lam * a + (1 - lam) * b (round half up) and keep both label sets."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"mixup: image sizes differ ({a.width}x{a.height} vs {b.width}x{b.height})")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup: lambda must lie in [0, 1], got {lam}")
    mixed = lam * a.pixels.astype(np.float64) + (1.0 - lam) * b.pixels.astype(np.float64)
    px = np.clip(np.floor(mixed + 0.5), 0, 255).astype(np.uint8)
    return Image(px, list(a.annotations) + list(b.annotations))


# ---------------------------------------------------------------------------
# Color
# ---------------------------------------------------------------------------


def color_jitter(img: Image, seed: int, hgain: float = 0.015, sgain: float = 0.7, vgain: float = 0.4) -> Image:
    """Random multiplicative HSV gains in [1 - gain, 1 + gain] per channel."""
    if hgain == 0 and sgain == 0 and vgain == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    r = rng.uniform(-1.0, 1.0, 3) * np.array([hgain, sgain, vgain]) + 1.0
    hsv = np.asarray(PILImage.fromarray(img.pixels, mode="RGB").convert("HSV"), dtype=np.float64)
    hsv[..., 0] = np.mod(hsv[..., 0] * r[0], 256.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * r[1], 0, 255)
    hsv[..., 2] = np.clip(hsv[..., 2] * r[2], 0, 255)
    out = PILImage.fromarray(hsv.astype(np.uint8), mode="HSV").convert("RGB")
    return Image(np.asarray(out, dtype=np.uint8).copy(), list(img.annotations))


# ---------------------------------------------------------------------------
# Schedules and sampling weights
# ---------------------------------------------------------------------------


@dataclass
class AugSchedule:
    p_mosaic0: float = 1.0
    p_mixup0: float = 0.15
    decay_start_frac: float = 0.8
    mosaic_grid: int = 4
    class_boost: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("p_mosaic0", "p_mixup0"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.decay_start_frac < 1.0:
            raise ValueError(f"decay_start_frac must lie in (0, 1), got {self.decay_start_frac}")
        if self.mosaic_grid not in (4, 9):
            raise ValueError(f"mosaic_grid must be 4 or 9, got {self.mosaic_grid}")


def adjust_augmentation(epoch: int, total_epochs: int, sched: AugSchedule = AugSchedule()) -> tuple[float, float]:
    """(p_mosaic, p_mixup): flat until decay_start_frac * E, then linear to 0 at E."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch must lie in [0, {total_epochs}], got {epoch}")
    start = sched.decay_start_frac * total_epochs
    factor = 1.0 if epoch < start else (total_epochs - epoch) / (total_epochs - start)
    return sched.p_mosaic0 * factor, sched.p_mixup0 * factor


def adjust_mosaic_weights(class_counts: Sequence[int], boosted_classes: Iterable[int] = (), boost: float = 1.0) -> list[float]:
    """Per-class mosaic sampling weights (sum 1): inverse-frequency weights times ``boost`` for boosted classes."""
    counts = list(class_counts)
    if not counts:
        raise ValueError("adjust_mosaic_weights: empty class counts")
    if boost < 1:
        raise ValueError(f"boost must be >= 1, got {boost}")
    boosted = set(boosted_classes)
    base = calculate_class_weights(counts)
    w = np.array([bw * (boost if c in boosted else 1.0) for c, bw in enumerate(base)])
    return list(w / w.sum())


def image_sampling_weights(images_classes: Sequence[Iterable[int]], class_weights: Sequence[float]) -> np.ndarray:
    """Probability of drawing each image: the max weight among its classes.

    Images without annotations get the smallest class weight.
    """
    cw = np.asarray(class_weights, dtype=np.float64)
    floor = cw.min()
    w = np.array([max((cw[c] for c in classes), default=floor) for classes in images_classes], dtype=np.float64)
    return w / w.sum()


# ---------------------------------------------------------------------------
# Preview
# ---------------------------------------------------------------------------


def draw_boxes(img: Image, class_names: Sequence[str] | None = None) -> np.ndarray:
    im = PILImage.fromarray(img.pixels, mode="RGB")
    draw = ImageDraw.Draw(im)
    palette = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180)]
    for b in img.annotations:
        x1, y1, x2, y2 = b.xyxy
        color = palette[b.class_id % len(palette)]
        draw.rectangle([x1 * img.width, y1 * img.height, x2 * img.width, y2 * img.height], outline=color)
        label = class_names[b.class_id] if class_names and b.class_id < len(class_names) else str(b.class_id)
        draw.text((x1 * img.width + 1, y1 * img.height + 1), label, fill=color)
    return np.asarray(im, dtype=np.uint8).copy()


def write_preview(img: Image, png_path: str | Path, class_names: Sequence[str] | None = None) -> Path:
    """Write an annotated PNG and a JSON sidecar with the transformed boxes."""
    png_path = Path(png_path)
    write_png(draw_boxes(img, class_names), png_path)
    sidecar = png_path.with_suffix(".json")
    payload = {
        "width": img.width,
        "height": img.height,
        "boxes": [
            {"class": b.class_id, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for b in img.annotations
        ],
    }
    sidecar.write_text(json.dumps(payload, indent=2))
    return sidecar
