"""YOLO-format datasets: labels, manifests, class statistics, splitting and label audits."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .boxes import BBox, iou

logger = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = ["blight", "curl", "grey mildew", "healthy", "leaf spot", "wilt"]
SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


# ---------------------------------------------------------------------------
# Label files
# ---------------------------------------------------------------------------


def parse_label_file(text: str, n_classes: int | None = None, source: str = "<labels>") -> list[BBox]:
    """Parse ``class cx cy w h`` lines (normalized floats) into boxes."""
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise DataError(f"{source}:{lineno}: expected 5 fields 'class cx cy w h', got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise DataError(f"{source}:{lineno}: could not parse {line.strip()!r}") from None
        if cls < 0 or (n_classes is not None and cls >= n_classes):
            raise DataError(f"{source}:{lineno}: class id {cls} outside [0, {n_classes})")
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise DataError(f"{source}:{lineno}: coordinates out of range in {line.strip()!r}")
        boxes.append(BBox(cx, cy, w, h, cls))
    return boxes


def serialize_labels(boxes: Sequence[BBox]) -> str:
    # repr() is the shortest string that round-trips a float exactly
    return "".join(f"{b.class_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}\n" for b in boxes)


def read_classes(path: str | Path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def write_classes(names: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names))


def label_path_for(image: str) -> str:
    """images/a/b.png -> labels/a/b.txt (YOLO convention)."""
    p = Path(image)
    parts = list(p.parts)
    if "images" in parts:
        parts[len(parts) - 1 - parts[::-1].index("images")] = "labels"
    return str(Path(*parts).with_suffix(".txt"))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class Entry:
    image: str
    label: str
    split: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    class_names: list[str]
    entries: list[Entry] = field(default_factory=list)
    class_counts: list[int] | None = None

    @classmethod
    def from_directory(cls, root: str | Path, class_names: Sequence[str] | None = None) -> "DatasetManifest":
        """Scan ``root/images`` for images; names come from ``root/classes.txt`` unless given."""
        root = Path(root)
        if class_names is None:
            classes_file = root / "classes.txt"
            if not classes_file.exists():
                raise DataError(f"{classes_file} not found")
            class_names = read_classes(classes_file)
        images = sorted(
            p.relative_to(root).as_posix()
            for p in (root / "images").rglob("*")
            if p.suffix.lower() in IMAGE_SUFFIXES
        )
        entries = [Entry(img, label_path_for(img)) for img in images]
        return cls(root, list(class_names), entries)

    def label_text(self, entry: Entry) -> str:
        path = self.root / entry.label
        return path.read_text() if path.exists() else ""

    def load_labels(self) -> dict[str, list[BBox]]:
        out = {}
        for e in self.entries:
            out[e.image] = parse_label_file(self.label_text(e), len(self.class_names), source=str(self.root / e.label))
        return out

    def split_of(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def to_dict(self) -> dict:
        d: dict = {
            "path": str(self.root),
            "names": {i: n for i, n in enumerate(self.class_names)},
            "nc": len(self.class_names),
        }
        if self.class_counts is not None:
            d["class_counts"] = list(self.class_counts)
        for s in SPLITS:
            d[s] = [e.image for e in self.entries if e.split == s]
        unsplit = [e.image for e in self.entries if e.split is None]
        if unsplit:
            d["images"] = unsplit
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        d = yaml.safe_load(path.read_text())
        if not isinstance(d, dict) or "names" not in d:
            raise DataError(f"{path}: not a dataset manifest (missing 'names')")
        root = Path(d.get("path") or path.parent)
        if not root.is_absolute():
            root = (path.parent / root).resolve()
        names = d["names"]
        if isinstance(names, dict):
            names = [names[k] for k in sorted(names, key=int)]
        entries = []
        for s in SPLITS:
            entries += [Entry(img, label_path_for(img), s) for img in d.get(s) or []]
        entries += [Entry(img, label_path_for(img)) for img in d.get("images") or []]
        counts = d.get("class_counts")
        return cls(root, list(names), entries, list(counts) if counts is not None else None)


def compute_class_counts(manifest: DatasetManifest) -> list[int]:
    """Exact per-class instance totals over all entries; stored on the manifest."""
    n = len(manifest.class_names)
    counts = [0] * n
    for e in manifest.entries:
        source = str(manifest.root / e.label)
        for b in parse_label_file(manifest.label_text(e), None, source=source):
            if b.class_id >= n:
                raise DataError(f"{source}: unknown class id {b.class_id} (only {n} classes)")
            counts[b.class_id] += 1
    manifest.class_counts = counts
    return counts


def class_count_table(class_names: Sequence[str], counts: Sequence[int]) -> str:
    """Label / count / percentage table, largest class first."""
    total = sum(counts)
    order = sorted(range(len(counts)), key=lambda i: (-counts[i], i))
    width = max([len("Label")] + [len(n) for n in class_names]) + 2
    lines = [f"{'Label':<{width}}{'Number of Samples':>18}{'Percentage':>12}"]
    for i in order:
        pct = 100.0 * counts[i] / total if total else 0.0
        lines.append(f"{class_names[i]:<{width}}{counts[i]:>18d}{pct:>11.1f}%")
    lines.append(f"{'total':<{width}}{total:>18d}{(100.0 if total else 0.0):>11.1f}%")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def majority_class(boxes: Sequence[BBox]) -> int:
    """Most frequent class id (ties -> lowest id); -1 for an empty image."""
    if not boxes:
        return -1
    counts = Counter(b.class_id for b in boxes)
    return min(counts, key=lambda c: (-counts[c], c))


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer apportionment of ``n`` by floors plus leftovers to the largest remainders (ties -> earlier)."""
    quotas = [n * f for f in fractions]
    floors = [math.floor(q + 1e-9) for q in quotas]
    left = n - sum(floors)
    order = sorted(range(len(quotas)), key=lambda k: (-(quotas[k] - floors[k]), k))
    for k in order[:left]:
        floors[k] += 1
    return floors


def _augmenting_path(bumped, row_need, col_need, k):
    """Alternating cell path from a needy row to a needy column (BFS), or None.

    Even steps are free cells to bump, odd steps are bumped cells to release.
    """
    rows = len(row_need)
    for s0 in range(rows):
        if row_need[s0] <= 0:
            continue
        prev: dict = {}
        frontier, seen_rows = [s0], {s0}
        while frontier:
            nxt = []
            for s in frontier:
                for j in range(k):
                    if (s, j) in bumped or ("c", j) in prev:
                        continue
                    prev[("c", j)] = s
                    if col_need[j] > 0:
                        path, col = [], j
                        while True:
                            r = prev[("c", col)]
                            path.append((r, col))
                            if r == s0:
                                return path[::-1]
                            col = prev[("r", r)]
                            path.append((r, col))
                    for r in range(rows):
                        if (r, j) in bumped and r not in seen_rows:
                            seen_rows.add(r)
                            prev[("r", r)] = j
                            nxt.append(r)
            frontier = nxt
    return None


def _stratified_counts(sizes: Sequence[int], fractions: Sequence[float]) -> list[list[int]]:
    """Per-stratum split counts: each cell is floor or ceil of its quota and
    column totals equal the global largest-remainder apportionment."""
    k = len(fractions)
    totals = largest_remainder(sum(sizes), fractions)
    quotas = [[n * f for f in fractions] for n in sizes]
    cells = [[math.floor(q + 1e-9) for q in row] for row in quotas]
    row_need = [n - sum(row) for n, row in zip(sizes, cells)]
    col_need = [t - sum(cells[s][j] for s in range(len(sizes))) for j, t in enumerate(totals)]
    order = sorted(
        ((s, j) for s in range(len(sizes)) for j in range(k)),
        key=lambda sj: (-(quotas[sj[0]][sj[1]] - cells[sj[0]][sj[1]]), sj[1], sj[0]),
    )
    bumped = set()
    for s, j in order:
        if row_need[s] > 0 and col_need[j] > 0:
            cells[s][j] += 1
            row_need[s] -= 1
            col_need[j] -= 1
            bumped.add((s, j))
    # leftovers: augmenting paths re-route earlier bumps so that every cell stays floor or floor + 1
    while True:
        path = _augmenting_path(bumped, row_need, col_need, k)
        if path is None:
            break
        s0, j_end = path[0][0], path[-1][1]
        for step, cell in enumerate(path):
            if step % 2 == 0:
                bumped.add(cell)
                cells[cell[0]][cell[1]] += 1
            else:
                bumped.discard(cell)
                cells[cell[0]][cell[1]] -= 1
        row_need[s0] -= 1
        col_need[j_end] -= 1
    for s in range(len(sizes)):
        for j in sorted(range(k), key=lambda j: -quotas[s][j]):
            if row_need[s] > 0:
                cells[s][j] += 1
                row_need[s] -= 1
    return cells


def split_dataset(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    labels: Mapping[str, Sequence[BBox]] | None = None,
) -> DatasetManifest:
    """Tag entries train/val/test, stratified by each image's majority class."""
    if len(fractions) != len(SPLITS) or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    if labels is None:
        labels = manifest.load_labels()
    strata: dict[int, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        strata.setdefault(majority_class(labels.get(e.image, [])), []).append(i)

    rng = np.random.default_rng(seed)
    keys = sorted(strata)
    small = [k for k in keys if len(strata[k]) < len(SPLITS)]
    for k in small:
        name = manifest.class_names[k] if 0 <= k < len(manifest.class_names) else "background"
        warnings.warn(f"stratum {name!r} has {len(strata[k])} images (< {len(SPLITS)}); all assigned to train")
        for i in strata[k]:
            manifest.entries[i].split = "train"
    big = [k for k in keys if k not in small]
    table = _stratified_counts([len(strata[k]) for k in big], fractions)
    for k, counts in zip(big, table):
        members = list(strata[k])
        perm = rng.permutation(len(members))
        start = 0
        for split, c in zip(SPLITS, counts):
            for idx in perm[start : start + c]:
                manifest.entries[members[idx]].split = split
            start += c
    return manifest


# ---------------------------------------------------------------------------
# Annotation consistency
# ---------------------------------------------------------------------------


@dataclass
class PairVerdict:
    image: str
    index_a: int | None
    index_b: int | None
    iou: float
    class_match: bool
    consistent: bool


@dataclass
class ClassAgreement:
    name: str
    sample_size: int
    consistent: int
    total: int

    @property
    def rate(self) -> float:
        return self.consistent / self.total if self.total else 1.0


@dataclass
class ConsistencyReport:
    rows: list[ClassAgreement]
    pairs: list[PairVerdict]
    iou_threshold: float

    @property
    def overall_rate(self) -> float:
        total = sum(r.total for r in self.rows)
        return sum(r.consistent for r in self.rows) / total if total else 1.0

    def to_text(self) -> str:
        width = max([len("Category")] + [len(r.name) for r in self.rows]) + 2
        lines = [f"{'Category':<{width}}{'Sample size':>12}{'Category concordance':>22}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}{r.sample_size:>12d}{f'{round(100 * r.rate)}%':>22}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "classes": [dict(asdict(r), rate=r.rate) for r in self.rows],
            "pairs": [asdict(p) for p in self.pairs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _greedy_match(a: Sequence[BBox], b: Sequence[BBox]) -> list[tuple[int, int, float]]:
    cand = [(iou(x, y), i, j) for i, x in enumerate(a) for j, y in enumerate(b)]
    cand = [c for c in cand if c[0] > 0]
    cand.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_a, used_b, out = set(), set(), []
    for v, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j, v))
    return out


def verify_consistency(
    labels_a: Mapping[str, Sequence[BBox]],
    labels_b: Mapping[str, Sequence[BBox]],
    iou_threshold: float = 0.85,
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
) -> ConsistencyReport:
    """Compare two annotation passes over the same images.

    Boxes are paired greedily by descending IoU; a pair is consistent iff
    IoU > ``iou_threshold`` and the classes agree. Unpaired boxes are
    inconsistent. Rates are per class of the reference (``labels_a``) box.
    """
    if set(labels_a) != set(labels_b):
        missing = sorted(set(labels_a) ^ set(labels_b))
        raise DataError(f"annotation sets cover different images: {missing[:5]}")
    n = len(class_names)
    images_with = [set() for _ in range(n)]
    consistent = [0] * n
    total = [0] * n
    pairs: list[PairVerdict] = []
    for image in sorted(labels_a):
        a, b = list(labels_a[image]), list(labels_b[image])
        for box in a + b:
            if box.class_id >= n:
                raise DataError(f"{image}: unknown class id {box.class_id}")
            images_with[box.class_id].add(image)
        matches = _greedy_match(a, b)
        matched_a = {i for i, _, _ in matches}
        matched_b = {j for _, j, _ in matches}
        for i, j, v in matches:
            same = a[i].class_id == b[j].class_id
            ok = v > iou_threshold and same
            c = a[i].class_id
            total[c] += 1
            consistent[c] += int(ok)
            pairs.append(PairVerdict(image, i, j, v, same, ok))
        for i in sorted(set(range(len(a))) - matched_a):
            total[a[i].class_id] += 1
            pairs.append(PairVerdict(image, i, None, 0.0, False, False))
        for j in sorted(set(range(len(b))) - matched_b):
            total[b[j].class_id] += 1
            pairs.append(PairVerdict(image, None, j, 0.0, False, False))
    rows = [
        ClassAgreement(class_names[c], len(images_with[c]), consistent[c], total[c])
        for c in range(n)
        if total[c] or images_with[c]
    ]
    return ConsistencyReport(rows, pairs, iou_threshold)
