"""Dataset checks: generator determinism, separability, CIFAR binary parsing
with precise error offsets, augmentation involutions, persistence, and the
annotation merge filter."""

import numpy as np
import pytest

from robustkit import autodiff as ad
from robustkit import data


class TestGenBlobs:
    def test_deterministic(self):
        a = data.gen_blobs(3, 50, 0.1, seed=7)
        b = data.gen_blobs(3, 50, 0.1, seed=7)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_zero_spread_hits_centers(self):
        ds = data.gen_blobs(4, 10, 0.0, seed=0)
        for cls in range(4):
            pts = ds.images[ds.labels == cls]
            assert np.allclose(pts, pts[0])

    def test_quarter_separation_spread_is_linearly_separable(self):
        # separation/spread = 4 leaves ~4 standard deviations between a
        # boundary and each center; a linear model should exceed 99%
        from sklearn.linear_model import LogisticRegression

        sep = data.blob_separation(3)
        ds = data.gen_blobs(3, 400, sep / 4, seed=1)
        clf = LogisticRegression(max_iter=1000).fit(ds.images, ds.labels)
        assert clf.score(ds.images, ds.labels) > 0.99

    def test_range_and_counts(self):
        ds = data.gen_blobs(5, 20, 0.3, seed=2)
        assert len(ds) == 100
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert ds.input_shape == (2,)


class TestDigits:
    def test_shapes_and_range(self):
        ds = data.load_digits_dataset(per_class=5)
        assert len(ds) == 50
        assert ds.input_shape == (1, 8, 8)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert ds.n_classes == 10


def _write_cifar(path, labels, value=128):
    blob = bytearray()
    for lab in labels:
        blob.append(lab)
        blob.extend([value] * 3072)
    path.write_bytes(bytes(blob))


class TestCifarReader:
    def test_reads_records_and_scales(self, tmp_path):
        f = tmp_path / "data_batch_1.bin"
        _write_cifar(f, [0, 1, 2, 1, 0], value=255)
        ds = data.load_cifar_subset(f, per_class=10)
        assert len(ds) == 5
        assert ds.input_shape == (3, 32, 32)
        assert ds.images.max() == 1.0
        assert sorted(ds.labels.tolist()) == [0, 0, 1, 1, 2]

    def test_per_class_limit(self, tmp_path):
        f = tmp_path / "b.bin"
        _write_cifar(f, [3] * 10 + [4] * 10)
        ds = data.load_cifar_subset(f, per_class=2)
        assert len(ds) == 4

    def test_truncated_file_names_offset(self, tmp_path):
        f = tmp_path / "bad.bin"
        _write_cifar(f, [0, 1])
        f.write_bytes(f.read_bytes()[:-10])
        with pytest.raises(data.DataError, match="byte offset 3073"):
            data.load_cifar_subset(f, per_class=10)

    def test_ten_thousand_records_per_batch_file(self, tmp_path):
        f = tmp_path / "full.bin"
        f.write_bytes(bytes(3073) * 10000)
        assert data.cifar_record_count(f) == 10000

    def test_zero_per_class(self, tmp_path):
        f = tmp_path / "b.bin"
        _write_cifar(f, [0, 1, 2])
        ds = data.load_cifar_subset(f, per_class=0)
        assert len(ds) == 0


class TestAugment:
    def test_identity_config(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, size=(3, 8, 8))
        out = data.augment(img, data.AugmentConfig(pad=0, flip_prob=0.0), rng)
        np.testing.assert_array_equal(out, img)

    def test_forced_flip_is_involution(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, size=(1, 6, 6))
        cfg = data.AugmentConfig(pad=0, flip_prob=1.0)
        twice = data.augment(data.augment(img, cfg, rng), cfg, rng)
        np.testing.assert_array_equal(twice, img)

    def test_output_shape_preserved(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, size=(3, 32, 32))
        for _ in range(10):
            out = data.augment(img, data.AugmentConfig(pad=4, flip_prob=0.5), rng)
            assert out.shape == img.shape
            assert out.min() >= 0 and out.max() <= 1

    def test_flat_inputs_reject_padding(self):
        rng = np.random.default_rng(3)
        with pytest.raises(data.DataError):
            data.augment(np.zeros(2), data.AugmentConfig(pad=2), rng)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = data.gen_blobs(3, 10, 0.2, seed=4)
        ds.save(tmp_path / "d")
        back = data.Dataset.load(tmp_path / "d")
        assert back.n_classes == ds.n_classes
        assert back.images.tobytes() == ds.images.tobytes()
        assert [e.id for e in back.examples] == [e.id for e in ds.examples]

    def test_batch_iteration_reproducible(self):
        ds = data.gen_blobs(3, 30, 0.2, seed=5)
        a = [t.copy() for _, t in ds.iterate_batches(16, np.random.default_rng(9))]
        b = [t.copy() for _, t in ds.iterate_batches(16, np.random.default_rng(9))]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


def _annotation(tmp_path, rid, decision, label, image):
    path = tmp_path / f"{rid}.aetn"
    ad.save_tensor(path, image)
    return {"id": rid, "decision": decision, "original_label": label,
            "adversarial_image": str(path)}


class TestMergeAnnotations:
    def test_filters_to_unchanged_only(self, tmp_path):
        ds = data.gen_blobs(2, 5, 0.1, seed=6)
        img = np.full(2, 0.5)
        recs = [
            _annotation(tmp_path, "a1", "unchanged", 0, img),
            _annotation(tmp_path, "a2", "unsure", 1, img),
            _annotation(tmp_path, "a3", "changed", 1, img),
            _annotation(tmp_path, "a4", "unchanged", 1, img),
        ]
        merged = data.merge_annotations(ds, recs)
        assert len(merged) == len(ds) + 2
        added = [e for e in merged.examples if e.origin == "annotation"]
        assert sorted(e.id for e in added) == ["a1", "a4"]
        assert all(e.label in (0, 1) for e in added)

    def test_zero_unchanged_returns_base(self, tmp_path):
        ds = data.gen_blobs(2, 5, 0.1, seed=7)
        recs = [_annotation(tmp_path, "a1", "changed", 0, np.full(2, 0.5))]
        merged = data.merge_annotations(ds, recs)
        assert merged is ds

    def test_idempotent_on_duplicate_ids(self, tmp_path):
        ds = data.gen_blobs(2, 5, 0.1, seed=8)
        recs = [_annotation(tmp_path, "a1", "unchanged", 0, np.full(2, 0.5))]
        once = data.merge_annotations(ds, recs)
        twice = data.merge_annotations(once, recs)
        assert len(twice) == len(once)

    def test_shape_mismatch_rejected(self, tmp_path):
        ds = data.gen_blobs(2, 5, 0.1, seed=9)
        recs = [_annotation(tmp_path, "a1", "unchanged", 0, np.full(3, 0.5))]
        with pytest.raises(data.DataError):
            data.merge_annotations(ds, recs)

    def test_unknown_decision_rejected(self, tmp_path):
        ds = data.gen_blobs(2, 5, 0.1, seed=10)
        recs = [_annotation(tmp_path, "a1", "maybe", 0, np.full(2, 0.5))]
        with pytest.raises(data.DataError):
            data.merge_annotations(ds, recs)
