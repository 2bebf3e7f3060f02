import struct

import numpy as np
import pytest

from eqprop_lab.data import (IdxFormatError, digits_row_profile, data_dir,
                             find_cifar10, find_mnist, load_cifar10_subset,
                             load_digits_split, load_mnist_idx, one_hot)


def write_idx_pair(tmp_path, n=5, rows=4, cols=3, image_magic=0x803,
                   label_magic=0x801, n_labels=None, truncate_images=0):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, n if n_labels is None else n_labels,
                          dtype=np.uint8)
    img = tmp_path / "images"
    lab = tmp_path / "labels"
    blob = struct.pack(">IIII", image_magic, n, rows, cols) + pixels.tobytes()
    if truncate_images:
        blob = blob[:-truncate_images]
    img.write_bytes(blob)
    lab.write_bytes(struct.pack(">II", label_magic, len(labels))
                    + labels.tobytes())
    return img, lab, pixels, labels


class TestIdx:
    def test_parses_and_scales(self, tmp_path):
        img, lab, pixels, labels = write_idx_pair(tmp_path)
        x, y = load_mnist_idx(img, lab)
        assert x.shape == (5, 12)
        assert np.all((x >= 0) & (x <= 1))
        np.testing.assert_array_equal(y, labels)
        np.testing.assert_allclose(x[0], pixels[0].ravel() / 255.0)

    def test_bad_image_magic(self, tmp_path):
        img, lab, *_ = write_idx_pair(tmp_path, image_magic=0x123)
        with pytest.raises(IdxFormatError, match="magic"):
            load_mnist_idx(img, lab)

    def test_bad_label_magic(self, tmp_path):
        img, lab, *_ = write_idx_pair(tmp_path, label_magic=0x123)
        with pytest.raises(IdxFormatError, match="magic"):
            load_mnist_idx(img, lab)

    def test_truncated_images_reports_offset(self, tmp_path):
        img, lab, *_ = write_idx_pair(tmp_path, truncate_images=7)
        with pytest.raises(IdxFormatError, match="byte offset"):
            load_mnist_idx(img, lab)

    def test_empty_file_truncation_at_zero(self, tmp_path):
        img = tmp_path / "empty"
        img.write_bytes(b"")
        _, lab, *_ = write_idx_pair(tmp_path)
        with pytest.raises(IdxFormatError, match="offset 0"):
            load_mnist_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img, lab, *_ = write_idx_pair(tmp_path, n_labels=4)
        with pytest.raises(IdxFormatError, match="mismatch"):
            load_mnist_idx(img, lab)


class TestCifar:
    def test_subset_loading(self, tmp_path):
        rng = np.random.default_rng(1)
        n = 7
        rec = np.zeros((n, 3073), dtype=np.uint8)
        rec[:, 0] = rng.integers(0, 10, n)
        rec[:, 1:] = rng.integers(0, 256, (n, 3072))
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(rec.tobytes())
        x, y = load_cifar10_subset(path, n=5)
        assert x.shape == (5, 3, 32, 32)
        np.testing.assert_array_equal(y, rec[:5, 0])
        with pytest.raises(ValueError, match="requested"):
            load_cifar10_subset(path, n=100)

    def test_partial_record_rejected(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(b"\x00" * 5000)
        with pytest.raises(ValueError, match="whole number"):
            load_cifar10_subset(path, n=1)


class TestHelpers:
    def test_one_hot(self):
        np.testing.assert_array_equal(one_hot([1, 0], 3),
                                      [[0, 1, 0], [1, 0, 0]])
        with pytest.raises(ValueError):
            one_hot([3], 3)

    def test_digits_split_deterministic_and_disjoint(self):
        a = load_digits_split(seed=0)
        b = load_digits_split(seed=0)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[0].shape[0] + a[2].shape[0] == 1797
        assert np.all((a[0] >= 0) & (a[0] <= 1))

    def test_row_profile(self):
        x = np.zeros((2, 64))
        x[0, :8] = 1.0  # first row of the first image all ones
        prof = digits_row_profile(x)
        assert prof.shape == (2, 8)
        assert prof[0, 0] == 1.0 and prof[0, 1] == 0.0

    def test_data_dir_resolution(self, monkeypatch):
        monkeypatch.delenv("EQPROP_DATA_DIR", raising=False)
        assert data_dir() is None
        monkeypatch.setenv("EQPROP_DATA_DIR", "/somewhere")
        assert data_dir() == "/somewhere"
        assert data_dir("/override") == "/override"

    def test_finders_absent(self, tmp_path):
        assert find_mnist(None) is None
        assert find_mnist(str(tmp_path)) is None
        assert find_cifar10(None) is None
        assert find_cifar10(str(tmp_path)) is None

    def test_find_cifar_nested(self, tmp_path):
        sub = tmp_path / "cifar-10-batches-bin"
        sub.mkdir()
        (sub / "data_batch_1.bin").write_bytes(b"")
        assert find_cifar10(str(tmp_path)) is not None
