import numpy as np
import pytest

from poisonadapt.data import (
    Dataset,
    ShiftSpec,
    generate_benchmark,
    load_dataset,
    rotate_image,
    save_dataset,
    split_train_test,
)
from poisonadapt.errors import ParseError, UsageError


def small_benchmark(seed=0, shift=None, n=100):
    shift = shift or ShiftSpec()
    return generate_benchmark(seed, 5, 12, 12, n, n, shift)


class TestGeneration:
    def test_identity_shift_zero_noise_reproduces_prototypes(self):
        shift = ShiftSpec(rotation_deg=0.0, brightness=0.0, noise_std=0.0)
        source, target = small_benchmark(seed=3, shift=shift)
        from poisonadapt.data import class_prototypes
        protos = class_prototypes(5, 12, 12, shift.prototype_seed)
        for ds in (source, target):
            for i in range(len(ds)):
                np.testing.assert_array_equal(ds.images[i], protos[ds.labels[i]])

    def test_same_seed_is_byte_identical(self):
        s1, t1 = small_benchmark(seed=5)
        s2, t2 = small_benchmark(seed=5)
        np.testing.assert_array_equal(s1.images, s2.images)
        np.testing.assert_array_equal(t1.images, t2.images)
        np.testing.assert_array_equal(s1.labels, s2.labels)
        np.testing.assert_array_equal(t1.labels, t2.labels)
        s3, _ = small_benchmark(seed=6)
        assert np.any(s3.images != s1.images)

    def test_balanced_classes_within_one(self):
        source, target = generate_benchmark(1, 5, 12, 12, 103, 101, ShiftSpec())
        for ds in (source, target):
            counts = np.bincount(ds.labels, minlength=5)
            assert counts.max() - counts.min() <= 1

    def test_pixels_in_unit_range_and_f32_exact(self):
        source, target = small_benchmark(seed=2)
        for ds in (source, target):
            assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
            np.testing.assert_array_equal(
                ds.images, ds.images.astype(np.float32).astype(np.float64))

    def test_parameter_bounds(self):
        with pytest.raises(UsageError):
            generate_benchmark(0, 2, 12, 12, 100, 100, ShiftSpec())
        with pytest.raises(UsageError):
            generate_benchmark(0, 5, 6, 6, 100, 100, ShiftSpec())
        with pytest.raises(UsageError):
            generate_benchmark(0, 5, 12, 12, 50, 100, ShiftSpec())

    def test_shift_moves_target_away_from_source(self):
        shift = ShiftSpec(noise_std=0.0)
        source, target = small_benchmark(seed=9, shift=shift)
        # same class, noiseless: shifted prototype differs from source prototype
        k = int(source.labels[0])
        tgt_k = target.images[target.labels == k][0]
        src_k = source.images[source.labels == k][0]
        assert np.abs(tgt_k - src_k).mean() > 0.02


class TestRotation:
    def test_zero_degrees_is_identity(self):
        img = np.random.default_rng(0).random((12, 12))
        np.testing.assert_array_equal(rotate_image(img, 0.0), img)

    def test_preserves_range(self):
        img = np.random.default_rng(1).random((12, 12))
        rot = rotate_image(img, 25.0)
        assert rot.min() >= img.min() - 1e-12 and rot.max() <= img.max() + 1e-12

    def test_360_is_near_identity(self):
        img = np.random.default_rng(2).random((12, 12))
        np.testing.assert_allclose(rotate_image(img, 360.0), img, atol=1e-9)


class TestSplit:
    def test_80_20_on_balanced_100(self):
        _, target = small_benchmark(seed=4)
        train, test = split_train_test(target, 0.8, seed=1)
        assert len(train) == 80 and len(test) == 20
        assert np.all(np.bincount(train.labels, minlength=5) == 16)
        assert np.all(np.bincount(test.labels, minlength=5) == 4)
        assert train.split == "train" and test.split == "test"

    def test_two_per_class_half_split(self):
        images = np.zeros((10, 12, 12))
        labels = np.repeat(np.arange(5), 2)
        ds = Dataset(images, labels, 5, "target", "full", 0)
        train, test = split_train_test(ds, 0.5, seed=0)
        assert np.all(np.bincount(train.labels, minlength=5) == 1)
        assert np.all(np.bincount(test.labels, minlength=5) == 1)

    def test_partition_is_exact_for_random_fractions(self):
        _, target = small_benchmark(seed=8)
        rng = np.random.default_rng(0)
        for _ in range(10):
            frac = float(rng.uniform(0.15, 0.85))
            train, test = split_train_test(target, frac, seed=int(rng.integers(1000)))
            # set-algebra oracle on flattened image bytes: every original row
            # appears exactly once across the two sides
            def keyset(ds):
                return sorted(ds.images[i].tobytes() for i in range(len(ds)))
            combined = keyset(train) + keyset(test)
            assert sorted(combined) == keyset(target)
            # per-class proportion within one example of the request
            for k in range(5):
                n_k = int((target.labels == k).sum())
                got = int((train.labels == k).sum())
                assert abs(got - frac * n_k) <= 1.0

    def test_deterministic_under_seed(self):
        _, target = small_benchmark(seed=4)
        a = split_train_test(target, 0.8, seed=3)
        b = split_train_test(target, 0.8, seed=3)
        np.testing.assert_array_equal(a[0].images, b[0].images)
        np.testing.assert_array_equal(a[1].labels, b[1].labels)

    def test_tiny_class_rejected(self):
        images = np.zeros((6, 12, 12))
        labels = np.array([0, 0, 1, 1, 2, 3])  # class 2,3 singletons
        ds = Dataset(images, labels, 5, "target", "full", 0)
        with pytest.raises(UsageError):
            split_train_test(ds, 0.5, seed=0)

    def test_unlabeled_rejected(self):
        _, target = small_benchmark(seed=4)
        with pytest.raises(UsageError):
            split_train_test(target.unlabeled_view(), 0.8, seed=0)

    def test_bad_fraction(self):
        _, target = small_benchmark(seed=4)
        for frac in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(UsageError):
                split_train_test(target, frac, seed=0)


class TestPersistence:
    def test_roundtrip_bit_exact(self, tmp_path):
        source, target = small_benchmark(seed=11)
        for name, ds in (("src", source), ("tgt", target), ("unl", target.unlabeled_view())):
            p = str(tmp_path / name)
            save_dataset(ds, p)
            back = load_dataset(p)
            np.testing.assert_array_equal(back.images, ds.images)
            if ds.labels is None:
                assert back.labels is None
            else:
                np.testing.assert_array_equal(back.labels, ds.labels)
            assert back.num_classes == ds.num_classes
            assert back.domain == ds.domain and back.split == ds.split
            assert back.seed == ds.seed
            assert back.meta == ds.meta

    def test_truncated_blob_is_parse_error(self, tmp_path):
        source, _ = small_benchmark(seed=11)
        p = str(tmp_path / "ds")
        save_dataset(source, p)
        blob = tmp_path / "ds" / "images.f32"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ParseError, match="images.f32"):
            load_dataset(p)

    def test_count_mismatch_is_parse_error(self, tmp_path):
        source, _ = small_benchmark(seed=11)
        p = str(tmp_path / "ds")
        save_dataset(source, p)
        man = tmp_path / "ds" / "manifest.txt"
        text = man.read_text().replace("num_examples 100", "num_examples 101")
        man.write_text(text)
        with pytest.raises(ParseError, match="images.f32"):
            load_dataset(p)

    def test_missing_label_blob_is_parse_error(self, tmp_path):
        source, _ = small_benchmark(seed=11)
        p = str(tmp_path / "ds")
        save_dataset(source, p)
        (tmp_path / "ds" / "labels.i32").unlink()
        with pytest.raises(ParseError, match="labels"):
            load_dataset(p)


class TestViews:
    def test_unlabeled_view_strips_labels_structurally(self):
        _, target = small_benchmark(seed=4)
        view = target.unlabeled_view()
        assert view.labels is None
        with pytest.raises(UsageError):
            view.require_labels()
        np.testing.assert_array_equal(view.images, target.images)

    def test_subset_preserves_order(self):
        _, target = small_benchmark(seed=4)
        sub = target.subset(np.array([5, 2, 9]))
        np.testing.assert_array_equal(sub.images[0], target.images[5])
        np.testing.assert_array_equal(sub.images[1], target.images[2])
        assert sub.labels[2] == target.labels[9]
