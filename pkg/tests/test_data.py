import os

import numpy as np
import pytest

from qtape import data as D
from qtape.errors import DataError, FormatError


class TestCifarLoader:
    def test_hand_built_records(self, tmp_path):
        # two records with known bytes
        images = np.zeros((2, 3, 32, 32), dtype=np.uint8)
        images[0, 0, 0, 0] = 255      # R channel, top-left, first image
        images[1, 2, 31, 31] = 128    # B channel, bottom-right, second
        labels = np.array([3, 7], dtype=np.int64)
        path = tmp_path / "data_batch_1.bin"
        D.write_cifar10_file(str(path), images, labels)

        raw = np.fromfile(path, dtype=np.uint8)
        assert raw.size == 2 * 3073
        assert raw[0] == 3 and raw[1] == 255          # label, first pixel
        assert raw[3073] == 7 and raw[-1] == 128      # second record

        ds = D.load_cifar10(str(tmp_path))
        assert ds.labels.tolist() == [3, 7]
        # normalization is affine per channel: the standout pixel stays max
        assert ds.images[0, 0, 0, 0] == ds.images[:, 0].max()
        assert ds.images.shape == (2, 3, 32, 32)
        assert ds.images.dtype == np.float32

    def test_train_standardization(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (50, 3, 32, 32)).astype(np.uint8)
        labels = rng.integers(0, 10, 50).astype(np.int64)
        D.write_cifar10_file(str(tmp_path / "data_batch_1.bin"),
                             images, labels)
        ds = D.load_cifar10(str(tmp_path))
        assert np.all(np.abs(ds.images.mean(axis=(0, 2, 3))) < 1e-4)
        assert np.all(np.abs(ds.images.std(axis=(0, 2, 3)) - 1.0) < 1e-3)

    def test_test_split_uses_train_stats(self, tmp_path):
        rng = np.random.default_rng(1)
        for name in ("data_batch_1.bin", "test_batch.bin"):
            images = rng.integers(0, 256, (20, 3, 32, 32)).astype(np.uint8)
            labels = rng.integers(0, 10, 20).astype(np.int64)
            D.write_cifar10_file(str(tmp_path / name), images, labels)
        train = D.load_cifar10(str(tmp_path), "train")
        test = D.load_cifar10(str(tmp_path), "test",
                              norm_stats=(train.norm_mean, train.norm_std))
        assert np.array_equal(test.norm_mean, train.norm_mean)
        with pytest.raises(DataError):
            D.load_cifar10(str(tmp_path), "test")

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(b"\x00" * 5000)
        with pytest.raises(FormatError):
            D.load_cifar10(str(tmp_path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            D.load_cifar10(str(tmp_path))

    def test_real_corpus_counts(self):
        # count check against the public distribution, when present
        path = os.environ.get("QTAPE_CIFAR_DIR", "/data/cifar-10-batches-bin")
        if not os.path.exists(os.path.join(path, "data_batch_1.bin")):
            pytest.skip("real CIFAR-10 corpus not available")
        ds = D.load_cifar10(path)
        assert len(ds) == 50000
        assert ds.labels.min() >= 0 and ds.labels.max() <= 9

    def test_loader_bit_stable(self, tmp_path):
        images, labels = D.synth_cifar_like(3, 40)
        D.write_cifar10_file(str(tmp_path / "data_batch_1.bin"),
                             images, labels)
        a = D.load_cifar10(str(tmp_path))
        b = D.load_cifar10(str(tmp_path))
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)


class TestSynth:
    def test_blobs_deterministic(self):
        a = D.synth_blobs(7, 64, 4, 8)
        b = D.synth_blobs(7, 64, 4, 8)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_blobs_balanced(self):
        ds = D.synth_blobs(8, 103, 5, 6)
        counts = np.bincount(ds.labels, minlength=5)
        assert counts.max() - counts.min() <= 1

    def test_blobs_image_shape(self):
        ds = D.synth_blobs(9, 20, 2, (3, 8, 8))
        assert ds.images.shape == (20, 3, 8, 8)

    def test_cifar_like_roundtrips_through_loader(self, tmp_path):
        D.make_synthetic_cifar_dir(str(tmp_path), seed=1, train_n=100,
                                   test_n=20)
        train = D.load_cifar10(str(tmp_path))
        assert len(train) == 100
        assert train.num_classes == 10


class TestAugment:
    def _batch(self, n=6):
        return np.arange(n * 3 * 32 * 32, dtype=np.float32) \
            .reshape(n, 3, 32, 32)

    def test_flags_off_identity(self):
        batch = self._batch()
        out = D.augment_batch(batch, np.random.default_rng(0),
                              hflip=False, translate=False)
        assert np.array_equal(out, batch)
        assert out is not batch

    def test_double_flip_is_identity(self):
        batch = self._batch()
        flipped = batch[:, :, :, ::-1]
        assert np.array_equal(flipped[:, :, :, ::-1], batch)

    def test_flip_preserves_pixel_multiset(self):
        batch = self._batch(4)
        rng = np.random.default_rng(1)
        out = D.augment_batch(batch, rng, hflip=True, translate=False)
        assert np.array_equal(np.sort(out.reshape(4, -1)),
                              np.sort(batch.reshape(4, -1)))

    def test_deterministic_given_state(self):
        batch = self._batch()
        a = D.augment_batch(batch, np.random.default_rng(5))
        b = D.augment_batch(batch, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_translation_pads_with_zeros(self):
        batch = np.ones((8, 1, 32, 32), dtype=np.float32)
        out = D.augment_batch(batch, np.random.default_rng(2),
                              hflip=False, translate=True)
        # some crop offsets shift zero padding into view
        assert (out == 0).any()
        assert out.shape == batch.shape
