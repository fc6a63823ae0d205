import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cottondet.boxes import BBox
from cottondet.data import (
    DEFAULT_CLASS_NAMES,
    DataError,
    DatasetManifest,
    class_count_table,
    compute_class_counts,
    label_path_for,
    largest_remainder,
    majority_class,
    parse_label_file,
    serialize_labels,
    split_dataset,
    verify_consistency,
)

from gen import COUNTS_BY_LABEL, consistency_fixture, counted_dataset, random_box, synthetic_manifest


class TestParse:
    def test_empty(self):
        assert parse_label_file("") == [] and parse_label_file("\n  \n") == []

    def test_healthy_line(self):
        (b,) = parse_label_file("3 0.5 0.5 0.1 0.2", n_classes=6)
        assert (b.class_id, b.cx, b.cy, b.w, b.h) == (3, 0.5, 0.5, 0.1, 0.2)
        assert DEFAULT_CLASS_NAMES[b.class_id] == "healthy"

    def test_out_of_range_coordinate(self):
        with pytest.raises(DataError, match="out of range"):
            parse_label_file("0 1.5 0.5 0.1 0.1")

    def test_malformed_reports_line(self):
        with pytest.raises(DataError, match=":2:"):
            parse_label_file("0 0.5 0.5 0.1 0.1\n0 0.5 0.5\n")
        with pytest.raises(DataError, match=":1:"):
            parse_label_file("x 0.5 0.5 0.1 0.1")

    def test_class_out_of_range(self):
        with pytest.raises(DataError):
            parse_label_file("6 0.5 0.5 0.1 0.1", n_classes=6)

    def test_round_trip_exact(self):
        rng = np.random.default_rng(0)
        boxes = [random_box(rng, int(rng.integers(6))) for _ in range(200)]
        assert parse_label_file(serialize_labels(boxes)) == boxes

    def test_label_path(self):
        assert label_path_for("images/train/a.jpg") == "labels/train/a.txt"


class TestCounts:
    def test_no_labels(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "images" / "a.png").write_bytes(b"")
        m = DatasetManifest.from_directory(tmp_path, DEFAULT_CLASS_NAMES)
        assert compute_class_counts(m) == [0] * 6

    def test_table_fixture(self, tmp_path):
        m = DatasetManifest.from_directory(counted_dataset(tmp_path / "ds"))
        assert compute_class_counts(m) == COUNTS_BY_LABEL
        assert m.class_counts == COUNTS_BY_LABEL
        rng = np.random.default_rng(1)
        m.entries = [m.entries[i] for i in rng.permutation(len(m.entries))]
        assert compute_class_counts(m) == COUNTS_BY_LABEL

    def test_additive_over_shards(self, tmp_path):
        m = DatasetManifest.from_directory(counted_dataset(tmp_path / "ds"))
        half = len(m.entries) // 2
        a = DatasetManifest(m.root, m.class_names, m.entries[:half])
        b = DatasetManifest(m.root, m.class_names, m.entries[half:])
        assert [x + y for x, y in zip(compute_class_counts(a), compute_class_counts(b))] == COUNTS_BY_LABEL

    def test_unknown_class_names_file(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        (tmp_path / "images" / "a.png").write_bytes(b"")
        (tmp_path / "labels" / "a.txt").write_text("7 0.5 0.5 0.1 0.1\n")
        m = DatasetManifest.from_directory(tmp_path, DEFAULT_CLASS_NAMES)
        with pytest.raises(DataError, match="a.txt"):
            compute_class_counts(m)

    def test_table_layout(self):
        text = class_count_table(DEFAULT_CLASS_NAMES, COUNTS_BY_LABEL)
        lines = text.splitlines()
        assert lines[1].split()[0] == "healthy" and lines[1].endswith("34.9%")
        assert "1423" in lines[1]
        assert lines[-1].split()[-2:] == ["4078", "100.0%"]

    def test_manifest_yaml_round_trip(self, tmp_path):
        m, labels = synthetic_manifest([12, 9])
        m.root = tmp_path
        split_dataset(m, seed=3, labels=labels)
        m.class_counts = [12, 9]
        m.save(tmp_path / "m.yaml")
        back = DatasetManifest.load(tmp_path / "m.yaml")
        assert back.class_names == m.class_names and back.class_counts == [12, 9]
        assert sorted((e.image, e.split) for e in back.entries) == sorted((e.image, e.split) for e in m.entries)

    def test_load_rejects_non_manifest(self, tmp_path):
        (tmp_path / "x.yaml").write_text("a: 1\n")
        with pytest.raises(DataError):
            DatasetManifest.load(tmp_path / "x.yaml")


class TestSplit:
    def test_ten_images(self):
        m, labels = synthetic_manifest([10])
        split_dataset(m, seed=0, labels=labels)
        assert [len(m.split_of(s)) for s in ("train", "val", "test")] == [8, 1, 1]

    def test_largest_remainder_arithmetic(self):
        assert largest_remainder(4078, (0.8, 0.1, 0.1)) == [3262, 408, 408]
        assert largest_remainder(10, (0.8, 0.1, 0.1)) == [8, 1, 1]

    def test_table_total_split_and_strata(self):
        m, labels = synthetic_manifest([1423, 782, 612, 486, 459, 316])
        split_dataset(m, seed=0, labels=labels)
        assert [len(m.split_of(s)) for s in ("train", "val", "test")] == [3262, 408, 408]
        for c, n in enumerate([1423, 782, 612, 486, 459, 316]):
            got = [sum(1 for e in m.split_of(s) if labels[e.image][0].class_id == c) for s in ("train", "val", "test")]
            assert sum(got) == n
            for g, f in zip(got, (0.8, 0.1, 0.1)):
                assert abs(g - n * f) <= 1

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(3, 60), min_size=1, max_size=6), st.integers(0, 2**31))
    def test_partition_and_stratum_bounds(self, sizes, seed):
        m, labels = synthetic_manifest(sizes)
        split_dataset(m, seed=seed, labels=labels)
        assert all(e.split in ("train", "val", "test") for e in m.entries)
        for c, n in enumerate(sizes):
            for s, f in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
                got = sum(1 for e in m.split_of(s) if labels[e.image][0].class_id == c)
                assert abs(got - n * f) <= 1

    def test_deterministic(self):
        tags = []
        for _ in range(2):
            m, labels = synthetic_manifest([30, 20])
            split_dataset(m, seed=11, labels=labels)
            tags.append([e.split for e in m.entries])
        assert tags[0] == tags[1]

    def test_small_stratum_goes_to_train(self):
        m, labels = synthetic_manifest([20, 2])
        with pytest.warns(UserWarning, match="curl"):
            split_dataset(m, seed=0, labels=labels)
        assert all(e.split == "train" for e in m.entries if labels[e.image][0].class_id == 1)

    def test_bad_fractions(self):
        m, labels = synthetic_manifest([10])
        with pytest.raises(ValueError):
            split_dataset(m, (0.5, 0.2, 0.2), labels=labels)

    def test_majority_class_ties_low(self):
        assert majority_class([BBox(0.5, 0.5, 0.1, 0.1, 4), BBox(0.5, 0.5, 0.1, 0.1, 2)]) == 2
        assert majority_class([]) == -1


class TestConsistency:
    def test_identical(self):
        rng = np.random.default_rng(0)
        labels = {f"i{k}": [random_box(rng, int(rng.integers(6))) for _ in range(3)] for k in range(5)}
        rep = verify_consistency(labels, labels)
        assert rep.overall_rate == 1.0 and all(r.rate == 1.0 for r in rep.rows)

    def test_iou_exactly_threshold_is_inconsistent(self):
        # dyadic extents make the IoU exactly 0.85 in floating point
        a, b = BBox(0.5, 0.5, 0.625, 0.5, 0), BBox(0.5, 0.5, 0.53125, 0.5, 0)
        rep = verify_consistency({"x": [a]}, {"x": [b]})
        assert rep.pairs[0].iou == 0.85 and not rep.pairs[0].consistent
        rep = verify_consistency({"x": [a]}, {"x": [b]}, iou_threshold=0.849)
        assert rep.pairs[0].consistent

    def test_class_mismatch_and_unmatched(self):
        a = {"x": [BBox(0.3, 0.3, 0.2, 0.2, 1), BBox(0.8, 0.8, 0.1, 0.1, 2)]}
        b = {"x": [BBox(0.3, 0.3, 0.2, 0.2, 5)]}
        rep = verify_consistency(a, b)
        assert rep.overall_rate == 0.0
        assert sorted((p.index_a, p.index_b) for p in rep.pairs if p.index_a is not None) == [(0, 0), (1, None)]

    def test_image_mismatch(self):
        with pytest.raises(DataError):
            verify_consistency({"a": []}, {"b": []})

    def test_table_layout_fixture(self):
        a, b = consistency_fixture()
        rep = verify_consistency(a, b)
        lines = rep.to_text().splitlines()
        assert lines[0].split() == ["Category", "Sample", "size", "Category", "concordance"]
        assert lines[1].split() == ["blight", "83", "92%"]
        assert rep.rows[0].consistent == 76 and rep.rows[0].sample_size == 83
        assert json.loads(rep.to_json())["classes"][0]["rate"] == pytest.approx(76 / 83)

    def test_rate_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = {f"i{k}": [random_box(rng, int(rng.integers(6))) for _ in range(int(rng.integers(0, 4)))] for k in range(3)}
            b = {k: [random_box(rng, int(rng.integers(6))) for _ in range(int(rng.integers(0, 4)))] for k in a}
            rep = verify_consistency(a, b)
            assert all(0.0 <= r.rate <= 1.0 for r in rep.rows)
