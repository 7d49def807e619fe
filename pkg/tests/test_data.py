"""Datasets: CIFAR binary round trip, synthetic generator, augmentation,
batching coverage."""

import numpy as np
import pytest

from multiexit import data as D
from multiexit.tensor import ContractError


class TestSynthetic:
    def test_deterministic(self):
        a = D.synth_dataset(4, 100, 16, seed=7)
        b = D.synth_dataset(4, 100, 16, seed=7)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_seed_changes_data(self):
        a = D.synth_dataset(4, 10, 16, seed=7)
        b = D.synth_dataset(4, 10, 16, seed=8)
        assert not np.array_equal(a.images, b.images)

    def test_linear_probe_oracle(self):
        ds = D.synth_dataset(4, 100, 16, seed=3)
        assert D.linear_probe_accuracy(ds) >= 0.99

    def test_probe_on_larger_setup(self):
        ds = D.synth_dataset(6, 50, 32, seed=11)
        assert D.linear_probe_accuracy(ds) >= 0.99

    def test_empty_per_class_accepted(self):
        ds = D.synth_dataset(4, 0, 16, seed=0)
        assert len(ds) == 0

    def test_shapes_and_balance(self):
        ds = D.synth_dataset(5, 20, 16, seed=0)
        assert ds.images.shape == (100, 3, 16, 16)
        assert np.bincount(ds.labels).tolist() == [20] * 5


class TestCifarBinary:
    def test_roundtrip_through_disk(self, tmp_path):
        ds = D.synth_dataset(7, 30, 32, seed=5)
        path = tmp_path / "train.bin"
        D.write_cifar_binary(ds, path)
        assert path.stat().st_size == 210 * D.CIFAR100_RECORD_BYTES
        back = D.load_cifar_binary(path)
        assert len(back) == 210 and back.num_classes == 100
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_truncated_file_rejected(self, tmp_path):
        ds = D.synth_dataset(4, 5, 32, seed=5)
        path = tmp_path / "train.bin"
        D.write_cifar_binary(ds, path)
        raw = path.read_bytes()[:-1]
        bad = tmp_path / "bad.bin"
        bad.write_bytes(raw)
        with pytest.raises(OSError, match="3074"):
            D.load_cifar_binary(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="not found"):
            D.load_cifar_binary(tmp_path / "nope.bin")

    def test_deterministic_order(self, tmp_path):
        ds = D.synth_dataset(4, 10, 32, seed=5)
        path = tmp_path / "t.bin"
        D.write_cifar_binary(ds, path)
        a = D.load_cifar_binary(path)
        b = D.load_cifar_binary(path)
        np.testing.assert_array_equal(a.images, b.images)


class TestAugment:
    def make(self):
        ds = D.synth_dataset(4, 10, 16, seed=2)
        return ds, D.AugmentConfig.for_dataset(ds)

    def test_center_crop_no_flip_is_normalized_identity(self):
        ds, cfg = self.make()
        rng = np.random.default_rng(0)
        img = ds.images[0]
        out = D.augment(img, cfg, rng, crop_offset=(cfg.crop_pad, cfg.crop_pad), flip=False)
        want = D.eval_transform(img, cfg)
        np.testing.assert_allclose(out, want, atol=0)

    def test_double_flip_is_identity(self):
        ds, cfg = self.make()
        rng = np.random.default_rng(0)
        once = D.augment(ds.images[0], cfg, rng, crop_offset=(4, 4), flip=True)
        twice = once[:, :, ::-1]
        want = D.eval_transform(ds.images[0], cfg)
        np.testing.assert_allclose(twice, want, atol=0)

    def test_seeded_batch_reproducible(self):
        ds, cfg = self.make()
        a = D.augment_batch(ds.images, cfg, np.random.default_rng(9))
        b = D.augment_batch(ds.images, cfg, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_shape_preserved(self):
        ds, cfg = self.make()
        out = D.augment_batch(ds.images, cfg, np.random.default_rng(1))
        assert out.shape == ds.images.shape and out.dtype == np.float32

    def test_normalized_mean_near_zero(self):
        ds = D.synth_dataset(4, 250, 16, seed=4)
        cfg = D.AugmentConfig.for_dataset(ds)
        out = D.augment_batch(ds.images, cfg, np.random.default_rng(0))
        channel_means = out.mean(axis=(0, 2, 3))
        assert np.abs(channel_means).max() < 0.1

    def test_stats_cached(self):
        ds = D.synth_dataset(4, 10, 16, seed=2)
        first = ds.channel_stats()
        assert ds.channel_stats() is first


class TestBatchIter:
    def test_sizes(self):
        ds = D.synth_dataset(2, 5, 8, seed=0)  # 10 items
        sizes = [len(lbl) for _, lbl in D.batch_iter(ds, 4, shuffle=False)]
        assert sizes == [4, 4, 2]

    def test_no_shuffle_preserves_order(self):
        ds = D.synth_dataset(2, 5, 8, seed=0)
        _, labels = next(D.batch_iter(ds, 10, shuffle=False))
        np.testing.assert_array_equal(labels, ds.labels)

    def test_same_seed_same_permutation(self):
        ds = D.synth_dataset(2, 8, 8, seed=0)
        a = [lbl.tolist() for _, lbl in D.batch_iter(ds, 4, shuffle=True, seed=3)]
        b = [lbl.tolist() for _, lbl in D.batch_iter(ds, 4, shuffle=True, seed=3)]
        assert a == b

    def test_epoch_coverage_multiset(self):
        ds = D.synth_dataset(3, 7, 8, seed=1)
        seen = np.concatenate([lbl for _, lbl in D.batch_iter(ds, 5, shuffle=True, seed=2)])
        assert sorted(seen.tolist()) == sorted(ds.labels.tolist())

    def test_empty_dataset_rejected(self):
        ds = D.synth_dataset(4, 0, 8, seed=0)
        with pytest.raises(ContractError):
            next(D.batch_iter(ds, 4))


class TestClassSubset:
    def test_remaps_labels(self):
        ds = D.synth_dataset(6, 10, 8, seed=0)
        sub = D.class_subset(ds, [2, 5])
        assert sub.num_classes == 2
        assert set(sub.labels.tolist()) == {0, 1}
        assert len(sub) == 20
