"""Command-line entry point: dataset tools, augmentation preview, toy training and evaluation."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .augment import Image, color_jitter, letterbox, mixup, mosaic, read_png, write_preview
from .boxes import BBox
from .data import (
    DataError,
    DatasetManifest,
    class_count_table,
    compute_class_counts,
    parse_label_file,
    read_classes,
    split_dataset,
    verify_consistency,
)
from .evaluation import EvalReport, comparison_table, map_summary, per_class_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
FORMATS = ("text", "json", "csv")

logger = logging.getLogger("cottondet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Subcommands repeat the global flags with suppressed defaults so they can
    # appear on either side of the subcommand name.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="global random seed (default 0)")
    parser.add_argument("--config", type=Path, default=d(None), help="dataset manifest YAML")
    parser.add_argument("--output-dir", type=Path, default=d(None), help="where outputs are written")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))
    parser.add_argument("--format", choices=FORMATS, default=d("text"))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    p = _Parser(prog="cottondet", description=__doc__)
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("stats", parents=[common], help="per-class instance counts")
    s.add_argument("dataset", nargs="?", type=Path, help="dataset directory or manifest YAML (default: --config)")

    s = sub.add_parser("split", parents=[common], help="stratified train/val/test split")
    s.add_argument("dataset", nargs="?", type=Path)
    s.add_argument("--fractions", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("-o", "--out", type=Path, help="manifest path (default: <output-dir>/manifest.yaml)")

    s = sub.add_parser("verify-labels", parents=[common], help="compare two annotators' label folders")
    s.add_argument("labels_a", type=Path)
    s.add_argument("labels_b", type=Path)
    s.add_argument("--classes", type=Path, help="classes.txt (default: <labels_a>/../classes.txt)")
    s.add_argument("--iou", type=float, default=0.85)

    s = sub.add_parser("augment", parents=[common], help="augmentation tools")
    aug = s.add_subparsers(dest="aug_command", parser_class=_Parser)
    a = aug.add_parser("preview", parents=[common], help="write augmented samples with boxes drawn")
    a.add_argument("dataset", nargs="?", type=Path)
    a.add_argument("--kind", choices=("letterbox", "mosaic4", "mosaic9", "mixup", "jitter"), default="mosaic4")
    a.add_argument("--count", type=int, default=4)
    a.add_argument("--size", type=int, default=640)

    s = sub.add_parser("train-toy", parents=[common], help="train the toy detector on synthetic shapes")
    s.add_argument("--epochs", type=int)
    s.add_argument("--images", type=int, help="number of synthetic images (default 200)")
    s.add_argument("--no-c2psa", action="store_true")
    s.add_argument("--static-weights", action="store_true", help="uniform class weights instead of count-based ones")

    s = sub.add_parser("eval", parents=[common], help="score detections against a manifest")
    s.add_argument("--pred", type=Path, required=True, help="JSON list of {image, class, cx, cy, w, h, conf}")
    s.add_argument("--gt", type=Path, help="manifest YAML (default: --config)")
    s.add_argument("--split", choices=("train", "val", "test"), help="restrict to one split")

    s = sub.add_parser("compare", parents=[common], help="tabulate several saved JSON reports")
    s.add_argument("reports", nargs="+", type=Path)
    s.add_argument("--names", nargs="+", help="model names (default: file stems)")

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient verification")
    s.add_argument("--points", type=int, default=10)
    return p


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _load_manifest(path: Path | None) -> DatasetManifest:
    if path is None:
        raise UsageError("a dataset directory or manifest is required (positional argument or --config)")
    if path.is_dir():
        return DatasetManifest.from_directory(path)
    if not path.exists():
        raise DataError(f"{path}: no such file or directory")
    return DatasetManifest.load(path)


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _output_dir(args, default: str) -> Path:
    out = args.output_dir or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_predictions(path: Path) -> dict[str, list[BBox]]:
    """Read the detection interchange format: a JSON list of {image, class, cx, cy, w, h, conf}."""
    try:
        items = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(items, list):
        raise DataError(f"{path}: expected a JSON list of detections")
    dets: dict[str, list[BBox]] = {}
    for k, d in enumerate(items):
        try:
            box = BBox(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]), int(d["class"]), float(d["conf"]))
            dets.setdefault(str(d["image"]), []).append(box)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: detection {k} is malformed ({e})") from e
    return dets


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_stats(args) -> int:
    manifest = _load_manifest(args.dataset or args.config)
    counts = compute_class_counts(manifest)
    total = sum(counts)
    pct = [100.0 * c / total if total else 0.0 for c in counts]
    if args.format == "json":
        rows = [{"class": n, "count": c, "percent": round(p, 1)} for n, c, p in zip(manifest.class_names, counts, pct)]
        _emit(json.dumps({"classes": rows, "total": total}, indent=2))
    elif args.format == "csv":
        rows = sorted(zip(manifest.class_names, counts, pct), key=lambda r: -r[1])
        _emit(_csv([("class", "count", "percent")] + [(n, c, f"{p:.1f}") for n, c, p in rows]))
    else:
        _emit(class_count_table(manifest.class_names, counts))
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = _load_manifest(args.dataset or args.config)
    labels = manifest.load_labels()
    split_dataset(manifest, tuple(args.fractions), args.seed, labels=labels)
    manifest.class_counts = compute_class_counts(manifest)
    out = args.out or _output_dir(args, ".") / "manifest.yaml"
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    sizes = {s: len(manifest.split_of(s)) for s in ("train", "val", "test")}
    if args.format == "json":
        _emit(json.dumps({"manifest": str(out), **sizes}))
    elif args.format == "csv":
        _emit(_csv([("split", "images")] + list(sizes.items())))
    else:
        _emit(f"wrote {out}: " + ", ".join(f"{k} {v}" for k, v in sizes.items()))
    return EXIT_OK


def _read_label_dir(directory: Path, n_classes: int) -> dict[str, list[BBox]]:
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return {
        p.relative_to(directory).as_posix(): parse_label_file(p.read_text(), n_classes, source=str(p))
        for p in sorted(directory.rglob("*.txt"))
        if p.name != "classes.txt"
    }


def cmd_verify_labels(args) -> int:
    classes_path = args.classes or args.labels_a.parent / "classes.txt"
    if not classes_path.exists():
        raise DataError(f"{classes_path} not found; pass --classes")
    names = read_classes(classes_path)
    a = _read_label_dir(args.labels_a, len(names))
    b = _read_label_dir(args.labels_b, len(names))
    missing = sorted(set(a) ^ set(b))
    if missing:
        raise DataError(f"label folders differ in files: {', '.join(missing[:5])}")
    report = verify_consistency(a, b, args.iou, names)
    if args.format == "json":
        _emit(report.to_json())
    elif args.format == "csv":
        rows = [("class", "sample_size", "targets", "consistent", "rate")]
        rows += [(r.name, r.sample_size, r.total, r.consistent, repr(r.rate)) for r in report.rows]
        _emit(_csv(rows))
    else:
        _emit(report.to_text())
    return EXIT_OK


def _load_image(manifest: DatasetManifest, entry) -> Image:
    pixels = read_png(manifest.root / entry.image)
    return Image(pixels, parse_label_file(manifest.label_text(entry), len(manifest.class_names), source=entry.label))


def cmd_augment(args) -> int:
    if args.aug_command != "preview":
        raise UsageError("augment needs a subcommand: preview")
    manifest = _load_manifest(args.dataset or args.config)
    if not manifest.entries:
        raise DataError("dataset has no images")
    out = _output_dir(args, "preview")
    rng = np.random.default_rng(args.seed)
    written = []
    for k in range(args.count):
        pick = lambda n: [_load_image(manifest, manifest.entries[int(i)]) for i in rng.integers(len(manifest.entries), size=n)]  # noqa: E731
        sub_seed = int(rng.integers(2**31))
        if args.kind == "letterbox":
            img = letterbox(pick(1)[0], args.size)
        elif args.kind in ("mosaic4", "mosaic9"):
            img = mosaic(pick(4 if args.kind == "mosaic4" else 9), sub_seed, target=args.size)
        elif args.kind == "mixup":
            a, b = (letterbox(im, args.size) for im in pick(2))
            img = mixup(a, b, float(np.random.default_rng(sub_seed).beta(32.0, 32.0)))
        else:
            img = color_jitter(letterbox(pick(1)[0], args.size), sub_seed)
        written.append(write_preview(img, out / f"{args.kind}_{k:03d}.png", manifest.class_names))
    if args.format == "json":
        _emit(json.dumps([str(p) for p in written]))
    else:
        _emit("\n".join(str(p) for p in written))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .traintoy import SyntheticSpec, TrainConfig, train

    overrides = {"seed": args.seed, "use_c2psa": not args.no_c2psa, "dynamic_class_weights": not args.static_weights}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = TrainConfig.toy(**overrides)
    spec = SyntheticSpec(seed=args.seed, **({"n_images": args.images} if args.images else {}))
    out = _output_dir(args, "runs/toy")
    result = train(cfg, spec, out)
    _emit_report(result.report, args.format)
    return EXIT_OK


def _emit_report(report: EvalReport, fmt: str) -> None:
    if fmt == "json":
        _emit(report.to_json())
    elif fmt == "csv":
        _emit(report.to_csv())
    else:
        sys.stdout.write(report.to_text())


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.gt or args.config)
    entries = manifest.split_of(args.split) if args.split else manifest.entries
    labels = manifest.load_labels()
    gts = {e.image: labels[e.image] for e in entries}
    dets = load_predictions(args.pred)
    unknown = sorted(set(dets) - set(labels))
    if unknown:
        raise DataError(f"predictions reference images not in the manifest: {', '.join(unknown[:5])}")
    dets = {k: v for k, v in dets.items() if k in gts}
    for v in list(dets.values()) + list(gts.values()):
        for b in v:
            if b.class_id >= len(manifest.class_names):
                raise DataError(f"class id {b.class_id} out of range for {len(manifest.class_names)} classes")
    report = map_summary(dets, gts, manifest.class_names)
    _emit_report(report, args.format)
    if args.output_dir is not None:
        out = _output_dir(args, ".")
        (out / "report.json").write_text(report.to_json())
    return EXIT_OK


def cmd_compare(args) -> int:
    names = args.names or [p.stem for p in args.reports]
    if len(names) != len(args.reports):
        raise UsageError("--names must give one name per report")
    reports = {}
    for name, path in zip(names, args.reports):
        try:
            reports[name] = EvalReport.from_dict(json.loads(path.read_text()))
        except FileNotFoundError as e:
            raise DataError(f"{path}: no such file") from e
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{path}: not a saved report ({e})") from e
    if args.format == "json":
        _emit(json.dumps({n: {"map50": r.map50, "map50_95": r.map50_95} for n, r in reports.items()}, indent=2))
    elif args.format == "csv":
        _emit(per_class_csv(reports))
    else:
        _emit(comparison_table(reports))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    results = run_suite(args.seed, args.points)
    if args.format == "json":
        _emit(json.dumps([{"name": r.name, "max_error": r.max_error, "passed": r.passed} for r in results], indent=2))
    elif args.format == "csv":
        _emit(_csv([("name", "max_error", "passed")] + [(r.name, repr(r.max_error), r.passed) for r in results]))
    else:
        for r in results:
            _emit(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<16} max rel err {r.max_error:.2e}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"error: gradient check above {TOLERANCE:g}: {', '.join(failed)}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


COMMANDS = {
    "stats": cmd_stats,
    "split": cmd_split,
    "verify-labels": cmd_verify_labels,
    "augment": cmd_augment,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "grad-check": cmd_grad_check,
}


def _limit_threads() -> None:
    value = os.environ.get("SSD_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"SSD_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    threadpool_limits(max(1, n))


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            sys.stderr.write(parser.format_usage())
            print("error: a subcommand is required", file=sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        _limit_threads()
        return COMMANDS[args.command](args)
    except UsageError as e:
        sys.stderr.write(parser.format_usage())
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, yaml.YAMLError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
