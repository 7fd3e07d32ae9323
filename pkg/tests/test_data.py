"""Manifest parsing, per-class splitting, image loading."""

import json
import math

import numpy as np
import pytest
from PIL import Image

from cre.data import (SPLIT_PRETRAIN, SPLIT_TEST, load_image, load_manifest,
                      make_manifest, save_manifest, split_by_class)
from cre.errors import ImageDecodeError, ManifestError


def write_manifest(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


class TestLoadManifest:
    def test_three_records_interned(self, tmp_path):
        p = tmp_path / "m.jsonl"
        write_manifest(p, [
            {"path": "a.png", "label": "cat"},
            {"path": "b.png", "label": "dog", "split": "test"},
            {"path": "c.png", "label": "cat", "base_class": "mammal"},
        ])
        m = load_manifest(p)
        assert len(m) == 3
        assert m.class_names == ("cat", "dog")
        assert [r.label for r in m.records] == [0, 1, 0]
        assert m.records[1].split == SPLIT_TEST
        assert m.base_class == {"cat": "mammal"}

    def test_duplicate_path_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        write_manifest(p, [{"path": "a.png", "label": "x"},
                           {"path": "a.png", "label": "y"}])
        with pytest.raises(ManifestError, match="a.png"):
            load_manifest(p)

    def test_empty_file_is_valid(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        m = load_manifest(p)
        assert len(m) == 0 and m.class_names == ()

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"path": "a.png", "label": "x"}\nnot json\n')
        with pytest.raises(ManifestError, match=":2:"):
            load_manifest(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        write_manifest(p, [{"path": "a.png", "label": "x", "extra": 1}])
        with pytest.raises(ManifestError, match="extra"):
            load_manifest(p)

    def test_bad_split_value_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        write_manifest(p, [{"path": "a.png", "label": "x", "split": "val"}])
        with pytest.raises(ManifestError):
            load_manifest(p)

    def test_save_round_trip(self, tmp_path):
        p = tmp_path / "m.jsonl"
        write_manifest(p, [
            {"path": "a.png", "label": "cat", "split": "pretrain", "base_class": "mammal"},
            {"path": "b.png", "label": "dog", "split": "test"},
        ])
        m = load_manifest(p)
        q = tmp_path / "echo.jsonl"
        save_manifest(m, q)
        again = load_manifest(q)
        assert again == m


class TestSplitByClass:
    def _manifest(self, tmp_path, counts):
        rows = []
        for label, n in counts.items():
            rows += [{"path": f"{label}_{i}.png", "label": label} for i in range(n)]
        p = tmp_path / "m.jsonl"
        write_manifest(p, rows)
        return load_manifest(p)

    def test_ten_samples_split_8_2(self, tmp_path):
        m = split_by_class(self._manifest(tmp_path, {"a": 10}), ratio=0.8, seed=0)
        splits = [r.split for r in m.records]
        assert splits.count(SPLIT_PRETRAIN) == 8 and splits.count(SPLIT_TEST) == 2

    def test_five_samples_split_4_1(self, tmp_path):
        m = split_by_class(self._manifest(tmp_path, {"a": 5}), ratio=0.8, seed=0)
        splits = [r.split for r in m.records]
        assert splits.count(SPLIT_PRETRAIN) == 4 and splits.count(SPLIT_TEST) == 1

    def test_singleton_class_goes_to_pretrain(self, tmp_path):
        m = split_by_class(self._manifest(tmp_path, {"a": 1, "b": 10}), ratio=0.8, seed=0)
        assert m.records[0].split == SPLIT_PRETRAIN

    def test_same_seed_idempotent(self, tmp_path):
        base = self._manifest(tmp_path, {"a": 20, "b": 13})
        m1 = split_by_class(base, seed=5)
        m2 = split_by_class(m1, seed=5)
        assert m1 == m2

    def test_union_is_everything(self, tmp_path):
        m = split_by_class(self._manifest(tmp_path, {"a": 7, "b": 9, "c": 4}), seed=1)
        assert all(r.split in (SPLIT_PRETRAIN, SPLIT_TEST) for r in m.records)

    def test_global_fraction_converges(self, tmp_path):
        counts = {f"c{i}": 10 + (i % 7) * 10 for i in range(30)}
        m = split_by_class(self._manifest(tmp_path, counts), ratio=0.8, seed=2)
        frac = sum(r.split == SPLIT_PRETRAIN for r in m.records) / len(m)
        assert abs(frac - 0.8) < 0.02

    def test_ceil_rule_per_class(self, tmp_path):
        for n in (3, 4, 6, 11):
            m = split_by_class(self._manifest(tmp_path, {"a": n}), ratio=0.8, seed=3)
            got = sum(r.split == SPLIT_PRETRAIN for r in m.records)
            assert got == math.ceil(0.8 * n)


class TestLoadImage:
    def test_solid_gray_scales_to_fraction(self, tmp_path):
        p = tmp_path / "g.png"
        Image.fromarray(np.full((8, 8, 3), 128, np.uint8)).save(p)
        arr = load_image(p)
        np.testing.assert_allclose(arr, 128 / 255, atol=1e-6)

    def test_grayscale_replicates_channels(self, tmp_path):
        p = tmp_path / "l.png"
        Image.fromarray(np.arange(64, dtype=np.uint8).reshape(8, 8), mode="L").save(p)
        arr = load_image(p)
        assert arr.shape == (8, 8, 3)
        np.testing.assert_array_equal(arr[..., 0], arr[..., 1])
        np.testing.assert_array_equal(arr[..., 0], arr[..., 2])

    def test_output_shape_is_target(self, tmp_path):
        p = tmp_path / "x.png"
        Image.fromarray(np.random.default_rng(0).integers(0, 255, (20, 30, 3), np.uint8)).save(p)
        assert load_image(p, size=(16, 16)).shape == (16, 16, 3)

    def test_decode_failure_recoverable(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"this is not an image")
        with pytest.raises(ImageDecodeError):
            load_image(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageDecodeError):
            load_image(tmp_path / "absent.png")


class TestMakeManifest:
    def test_directory_tree(self, tmp_path):
        for cls in ("b_class", "a_class"):
            d = tmp_path / cls
            d.mkdir()
            for i in range(3):
                Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(d / f"{i}.png")
        m = make_manifest(tmp_path)
        assert m.class_names == ("a_class", "b_class")  # sorted
        assert len(m) == 6
        assert all(r.split is None for r in m.records)

    def test_deterministic_order(self, tmp_path):
        d = tmp_path / "c"
        d.mkdir()
        for name in ("z.png", "a.png", "m.png"):
            Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(d / name)
        m1 = make_manifest(tmp_path)
        m2 = make_manifest(tmp_path)
        assert [r.path for r in m1.records] == [r.path for r in m2.records]
