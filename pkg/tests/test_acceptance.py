"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section of the pytest
terminal summary.
"""

import math
import time
from pathlib import Path

import numpy as np

from cottondet import gradsuite
from cottondet.augment import AugSchedule, Image, adjust_augmentation, mixup, mosaic
from cottondet.blocks import RepConvBlock, repconv_forward
from cottondet.boxes import AlignmentParams, BBox, assign
from cottondet.cli import run
from cottondet.data import split_dataset, verify_consistency
from cottondet.evaluation import map_summary
from cottondet.losses import FocalParams, calculate_class_weights, focal_loss
from cottondet.tensor import Tensor
from cottondet.traintoy import SyntheticSpec, TrainConfig, images_to_batch, raw_logits, train

from acceptance_log import record
from gen import (
    as_tuples,
    assignment_fixture,
    consistency_fixture,
    detection_fixture,
    random_box,
    synthetic_manifest,
    counted_dataset,
)
from oracles import assign_bruteforce, map_oracle

GOLDEN = Path(__file__).parent / "data" / "eval_golden"
COTTON_COUNTS = [1423, 782, 612, 486, 459, 316]


def _t(b):
    return (b.cx, b.cy, b.w, b.h)


def test_criterion_01_reparameterization():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        c_in = int(rng.integers(1, 9))
        c_out = c_in if rng.random() < 0.5 else int(rng.integers(1, 9))
        block = RepConvBlock(c_in, c_out, rng=rng)
        for _, p in block.named_parameters():
            p.data[...] = rng.normal(0, 0.5, size=p.shape)
        block.merge()
        x = Tensor(rng.normal(size=(int(rng.integers(1, 3)), c_in, int(rng.integers(3, 12)), int(rng.integers(3, 12)))))
        assert x.dtype == np.float32
        diff = np.abs(repconv_forward(block, x, "train").data - repconv_forward(block, x, "merged").data).max()
        worst = max(worst, float(diff))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and secs < 30
    record(1, "RepConv merge equivalence", ok, f"max |train - merged| = {worst:.2e} (<= 1e-5), {secs:.1f}s (< 30s)")
    assert ok


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    results = gradsuite.run_suite(seed=0, points=10)
    secs = time.perf_counter() - t0
    names = {r.name for r in results}
    expected = {"conv2d", "se", "cbam_spatial", "c2psa", "fusion_node", "focal", "objectness_bce", "siou"}
    worst = max(r.max_error for r in results)
    ok = names == expected and all(r.passed and r.points == 10 for r in results) and secs < 120
    record(2, "gradient suite", ok, f"{len(results)} checks, worst rel err {worst:.2e} (<= 1e-3), {secs:.1f}s (< 120s)")
    assert ok


def test_criterion_03_loss_reductions():
    ps = np.concatenate([np.linspace(1e-6, 1.0, 500), np.logspace(-7, 0, 200)])
    ce_err = max(abs(focal_loss(float(p), 0, FocalParams(gamma=0.0)) + math.log(p)) for p in ps)
    half = focal_loss(0.5, 0, FocalParams(gamma=2.0))
    ones = [focal_loss(1.0, 0, FocalParams(gamma=g, class_weights=[a])) for g in (0.0, 1.0, 2.0, 3.5) for a in (0.3, 1.0, 2.0)]
    ok = ce_err <= 1e-9 and abs(half - 0.173286) <= 1e-6 and all(v == 0.0 for v in ones)
    record(
        3,
        "loss reductions",
        ok,
        f"gamma=0 vs CE max err {ce_err:.1e}; focal(0.5) = {half:.6f}; p=1 gives {sorted(set(ones))}",
    )
    assert ok


def test_criterion_04_class_weights():
    n, c = sum(COTTON_COUNTS), len(COTTON_COUNTS)
    w = calculate_class_weights(COTTON_COUNTS)
    arith_err = max(abs(a - n / (c * k)) for a, k in zip(w, COTTON_COUNTS))
    uniform = calculate_class_weights([250] * 6)
    rng = np.random.default_rng(4)
    mean_err = 0.0
    for _ in range(500):
        counts = rng.integers(0, 5000, size=int(rng.integers(1, 10)))
        if counts.sum() == 0:
            continue
        cw = np.array(calculate_class_weights(counts))
        mean_err = max(mean_err, abs(float(np.sum(counts / counts.sum() * cw)) - 1.0))
    mean_err = max(mean_err, abs(sum(k / n * x for k, x in zip(COTTON_COUNTS, w)) - 1.0))
    ok = arith_err <= 1e-6 and all(abs(u - 1.0) <= 1e-12 for u in uniform) and mean_err <= 1e-9
    record(
        4,
        "class weights",
        ok,
        f"raw weights err {arith_err:.1e}; uniform -> ones; freq-weighted mean err {mean_err:.1e}",
    )
    assert ok


def test_criterion_05_assigner():
    rng = np.random.default_rng(55)
    mismatches, over_topk, n_fix = 0, 0, 0
    for ties in (False, True):
        for _ in range(1000):
            preds, scores, gts, topk = assignment_fixture(rng, ties=ties)
            res = assign(list(zip(preds, scores)), gts, AlignmentParams(topk=topk))
            matched, score = assign_bruteforce(
                [_t(b) for b in preds], scores.tolist(), [_t(g) for g in gts], [g.class_id for g in gts], topk=topk
            )
            n_fix += 1
            if res.matched_gt.tolist() != matched or not np.allclose(res.score, score, rtol=0, atol=1e-12):
                mismatches += 1
            over_topk += sum(int((res.matched_gt == gi).sum() > topk) for gi in range(len(gts)))
    changed = 0
    for k in range(100):
        preds, scores, gts, topk = assignment_fixture(rng, ties=k % 2 == 1)
        base = assign(list(zip(preds, scores)), gts, AlignmentParams(topk=topk)).matched_gt
        for c in (0.5, 0.37):
            scaled = assign(list(zip(preds, scores * c)), gts, AlignmentParams(topk=topk)).matched_gt
            changed += int(not np.array_equal(base, scaled))
    ok = mismatches == 0 and over_topk == 0 and changed == 0
    record(
        5,
        "assigner",
        ok,
        f"{n_fix} fixtures vs brute force: {mismatches} mismatches; {over_topk} gts over topk; "
        f"{changed}/200 scaled runs changed",
    )
    assert ok


def test_criterion_06_map_oracle():
    rng = np.random.default_rng(66)
    worst, n_cmp = 0.0, 0
    for k in range(600):
        dets, gts = detection_fixture(rng, quantize_conf=k % 2 == 1)
        rep = map_summary(dets, gts, with_confusion=False)
        ap50, ap5095 = map_oracle(as_tuples(dets), as_tuples(gts), range(2))
        if [int(r.name) for r in rep.rows] != sorted(ap50):
            worst = math.inf
            continue
        for r in rep.rows:
            worst = max(worst, abs(r.ap50 - ap50[int(r.name)]), abs(r.ap50_95 - ap5095[int(r.name)]))
            n_cmp += 1
    violations = 0
    for _ in range(1000):
        dets, gts = detection_fixture(rng)
        rep = map_summary(dets, gts, with_confusion=False)
        violations += int(rep.map50_95 > rep.map50)
    ok = worst <= 1e-9 and violations == 0
    record(6, "mAP oracle", ok, f"{n_cmp} class APs vs oracle, max err {worst:.1e}; mAP50-95 > mAP50 in {violations}/1000")
    assert ok


def _source(rng, w, h, next_id):
    boxes = []
    for _ in range(int(rng.integers(0, 4))):
        boxes.append(random_box(rng, next_id[0], 0.05, 0.9))
        next_id[0] += 1
    return Image(rng.integers(0, 256, (h, w, 3), dtype=np.uint8), boxes)


def test_criterion_07_augmentation_integrity():
    rng = np.random.default_rng(77)
    bad_box, bad_class, not_repro = 0, 0, 0
    for k in range(1000):
        next_id = [0]
        kind = ("mosaic4", "mosaic9", "mixup")[k % 3]
        seed = int(rng.integers(2**31))
        if kind == "mixup":
            w, h = (int(v) for v in rng.integers(8, 40, 2))
            srcs = [_source(rng, w, h, next_id) for _ in range(2)]
            lam = float(np.random.default_rng(seed).beta(32, 32))
            out, again = mixup(srcs[0], srcs[1], lam), mixup(srcs[0], srcs[1], lam)
        else:
            srcs = [_source(rng, int(rng.integers(8, 60)), int(rng.integers(8, 60)), next_id) for _ in range(4 if kind == "mosaic4" else 9)]
            out, again = mosaic(srcs, seed, target=96), mosaic(srcs, seed, target=96)
        for b in out.annotations:
            x1, y1, x2, y2 = b.xyxy
            bad_box += int(not (-1e-12 <= x1 < x2 <= 1 + 1e-12 and -1e-12 <= y1 < y2 <= 1 + 1e-12))
        ids_in = [b.class_id for s in srcs for b in s.annotations]
        ids_out = [b.class_id for b in out.annotations]
        if kind == "mixup":
            bad_class += int(ids_out != ids_in)
        else:
            bad_class += int(len(set(ids_out)) != len(ids_out) or not set(ids_out) <= set(ids_in))
        not_repro += int(out.pixels.tobytes() != again.pixels.tobytes() or out.annotations != again.annotations)
    sched = AugSchedule()
    ends_ok = True
    for E in (1, 10, 40, 100, 301):
        vals = [adjust_augmentation(e, E, sched) for e in range(E + 1)]
        ends_ok &= vals[0] == (sched.p_mosaic0, sched.p_mixup0) and vals[-1] == (0.0, 0.0)
        ends_ok &= all(b[0] <= a[0] and b[1] <= a[1] for a, b in zip(vals, vals[1:]))
    ok = bad_box == 0 and bad_class == 0 and not_repro == 0 and ends_ok
    record(
        7,
        "augmentation integrity",
        ok,
        f"1000 ops: {bad_box} boxes off-canvas, {bad_class} class violations, {not_repro} non-reproducible; "
        f"schedule endpoints/monotone {'ok' if ends_ok else 'broken'}",
    )
    assert ok


def test_criterion_08_dataset_tooling():
    m, labels = synthetic_manifest(COTTON_COUNTS)
    split_dataset(m, seed=0, labels=labels)
    sizes = [len(m.split_of(s)) for s in ("train", "val", "test")]
    worst = 0.0
    for c, n in enumerate(COTTON_COUNTS):
        for s, f in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
            got = sum(1 for e in m.split_of(s) if labels[e.image][0].class_id == c)
            worst = max(worst, abs(got - n * f))
    a, b = BBox(0.5, 0.5, 0.625, 0.5, 0), BBox(0.5, 0.5, 0.53125, 0.5, 0)
    edge = verify_consistency({"x": [a]}, {"x": [b]})
    edge_ok = edge.pairs[0].iou == 0.85 and not edge.pairs[0].consistent
    la, lb = consistency_fixture()
    lines = verify_consistency(la, lb).to_text().splitlines()
    layout_ok = lines[0].split() == ["Category", "Sample", "size", "Category", "concordance"] and lines[1].split() == [
        "blight",
        "83",
        "92%",
    ]
    ok = sizes == [3262, 408, 408] and worst <= 1 and edge_ok and layout_ok
    record(
        8,
        "dataset tooling",
        ok,
        f"split {sizes[0]}/{sizes[1]}/{sizes[2]}, worst stratum deviation {worst:.1f}; "
        f"IoU 0.85 inconsistent: {edge_ok}; table row {' '.join(lines[1].split())!r}",
    )
    assert ok


def test_criterion_09_end_to_end(tmp_path):
    cfg = TrainConfig.toy()
    assert cfg.use_c2psa and cfg.dynamic_class_weights and cfg.augmentation.p_mosaic0 > 0
    t0 = time.perf_counter()
    result = train(cfg, SyntheticSpec(seed=cfg.seed), tmp_path)
    secs = time.perf_counter() - t0
    x = images_to_batch(result.heldout)
    before = raw_logits(result.model, x)
    result.model.merge_reparam()
    shift = float(np.max(np.abs(raw_logits(result.model, x) - before)))
    map50 = result.report.map50
    ok = secs < 600 and map50 >= 0.9 and shift <= 1e-4
    record(
        9,
        "end-to-end toy training",
        ok,
        f"{cfg.epochs} epochs on {SyntheticSpec().n_images} images in {secs:.0f}s (< 600s), "
        f"held-out mAP50 {map50:.3f} (>= 0.9), merge logit shift {shift:.1e} (<= 1e-4)",
    )
    assert ok


def test_criterion_10_report_formats(tmp_path, capsys):
    code = run(["eval", "--pred", str(GOLDEN / "preds.json"), "--gt", str(GOLDEN / "manifest.yaml")])
    out = capsys.readouterr().out
    eval_ok = code == 0 and out == (GOLDEN / "expected_report.txt").read_text()
    code = run(["stats", str(counted_dataset(tmp_path / "ds"))])
    stats = capsys.readouterr().out
    healthy = next((ln for ln in stats.splitlines() if ln.startswith("healthy")), "")
    stats_ok = code == 0 and healthy.split()[-1:] == ["34.9%"]
    ok = eval_ok and stats_ok
    record(
        10,
        "report formats",
        ok,
        f"eval byte-identical to golden: {eval_ok}; stats healthy line {' '.join(healthy.split())!r}",
    )
    assert ok
