import json
import math

import numpy as np
import pytest

from cottondet.traintoy import (
    SyntheticSpec,
    ToyDetector,
    TrainConfig,
    generate_synthetic,
    images_to_batch,
    load_checkpoint,
    lr_schedule,
    progressive_size,
    raw_logits,
    save_checkpoint,
    train,
)

TINY_SPEC = dict(n_images=16, image_size=64)


def tiny_cfg(**kw):
    params = dict(epochs=4, warmup_epochs=1, img_size_start=32, img_size_end=64, batch_size=4)
    params.update(kw)
    return TrainConfig.toy(**params)


class TestSchedules:
    cfg = TrainConfig(epochs=24, base_lr=0.01, min_lr=0.0005)

    def test_warmup(self):
        assert lr_schedule(0, self.cfg) == pytest.approx(0.01 / 3)
        assert lr_schedule(2, self.cfg) == pytest.approx(0.01, abs=1e-15)

    def test_final_epoch_is_min(self):
        assert lr_schedule(23, self.cfg) == pytest.approx(0.0005, abs=1e-15)

    def test_midpoint(self):
        # annealing runs over epochs 3..23, so its midpoint is epoch 13
        assert lr_schedule(13, self.cfg) == pytest.approx((0.01 + 0.0005) / 2, abs=1e-15)

    @pytest.mark.parametrize("E", [5, 24, 100])
    def test_continuous_and_monotone_after_warmup(self, E):
        cfg = TrainConfig(epochs=E)
        lrs = [lr_schedule(e, cfg) for e in range(E)]
        assert lrs[cfg.warmup_epochs - 1] == pytest.approx(lrs[cfg.warmup_epochs], abs=1e-15)
        assert all(b <= a + 1e-15 for a, b in zip(lrs[cfg.warmup_epochs - 1 :], lrs[cfg.warmup_epochs :]))

    def test_progressive_size(self):
        cfg = TrainConfig(epochs=100)
        assert progressive_size(0, cfg) == 320
        assert progressive_size(25, cfg) == 480
        assert all(progressive_size(e, cfg) == 640 for e in range(50, 100))
        sizes = [progressive_size(e, cfg) for e in range(100)]
        assert all(s % 32 == 0 for s in sizes) and sizes == sorted(sizes)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=3, warmup_epochs=3)
        with pytest.raises(ValueError):
            TrainConfig(img_size_start=100)


class TestSynthetic:
    def test_labels_exact_and_small_band(self):
        spec = SyntheticSpec(n_images=60, image_size=128)
        imgs = generate_synthetic(spec)
        areas = [b.w * b.h for im in imgs for b in im.annotations]
        assert min(areas) < 0.05
        for im in imgs[:10]:
            for b in im.annotations:
                x1, y1, x2, y2 = (int(round(v * 128)) for v in b.xyxy)
                inner = im.pixels[(y1 + y2) // 2, (x1 + x2) // 2]
                if spec.classes[b.class_id] != "ring":
                    assert inner.min() >= 140  # shape color is drawn at the box center

    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(n_images=5, seed=3))
        b = generate_synthetic(SyntheticSpec(n_images=5, seed=3))
        assert all(x.pixels.tobytes() == y.pixels.tobytes() and x.annotations == y.annotations for x, y in zip(a, b))


class TestModel:
    x = images_to_batch(generate_synthetic(SyntheticSpec(n_images=2, image_size=64)))

    def test_c2psa_keeps_output_shapes(self):
        with_c = [tuple(t.shape for t in lvl) for lvl in ToyDetector(3, use_c2psa=True)(self.x)]
        without = [tuple(t.shape for t in lvl) for lvl in ToyDetector(3, use_c2psa=False)(self.x)]
        assert with_c == without

    def test_merge_preserves_logits(self):
        m = ToyDetector(3, seed=5)
        rng = np.random.default_rng(0)
        for _, p in m.named_parameters():
            p.data += rng.normal(0, 0.05, p.data.shape).astype(p.data.dtype)
        before = raw_logits(m, self.x)
        m.merge_reparam()
        assert np.max(np.abs(raw_logits(m, self.x) - before)) <= 1e-4

    def test_checkpoint_round_trip(self, tmp_path):
        m = ToyDetector(3, use_c2psa=False, seed=2)
        save_checkpoint(m, TrainConfig.toy(), tmp_path / "ck")
        back = load_checkpoint(tmp_path / "ck")
        assert np.array_equal(raw_logits(back, self.x), raw_logits(m, self.x))
        assert json.loads((tmp_path / "ck" / "descriptor.json").read_text())["config"]["epochs"] == 40


class TestTrain:
    def test_zero_epochs_keeps_initialization(self, tmp_path):
        res = train(tiny_cfg(epochs=0), SyntheticSpec(**TINY_SPEC), tmp_path)
        init = ToyDetector(3, seed=0)
        x = images_to_batch(res.heldout[:1])
        assert np.array_equal(raw_logits(res.model, x), raw_logits(init, x))
        assert res.log == [] and res.final_loss is None
        assert (tmp_path / "report.txt").exists()

    def test_same_seed_same_loss(self):
        a = train(tiny_cfg(), SyntheticSpec(**TINY_SPEC))
        b = train(tiny_cfg(), SyntheticSpec(**TINY_SPEC))
        assert a.final_loss == b.final_loss
        assert [e["total"] for e in a.log] == [e["total"] for e in b.log]

    def test_log_fields_and_files(self, tmp_path):
        res = train(tiny_cfg(), SyntheticSpec(**TINY_SPEC), tmp_path)
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 4
        e = json.loads(lines[-1])
        assert e["total"] == pytest.approx(e["lambda_cls"] * e["cls"] + e["lambda_reg"] * e["reg"] + e["lambda_obj"] * e["obj"], rel=1e-9)
        # decay starts at 0.8 * 4 = 3.2, so the last epoch is still on the plateau
        assert e["p_mosaic"] == 0.5 and e["epoch"] == 3
        assert all(math.isfinite(json.loads(x)["total"]) for x in lines)
        assert res.checkpoint is not None and (res.checkpoint / "descriptor.json").exists()

    def test_training_makes_progress(self):
        first, last = [], []
        for seed in range(3):
            res = train(tiny_cfg(epochs=6, seed=seed), SyntheticSpec(n_images=24, image_size=64, seed=seed))
            first.append(res.log[0]["total"])
            last.append(res.log[-1]["total"])
        assert np.median(last) < np.median(first)
