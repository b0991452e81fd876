import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turnpike_resnet.data import (
    Dataset,
    IdxCountMismatch,
    IdxMagicError,
    IdxTruncatedError,
    idx_images_bytes,
    idx_labels_bytes,
    load_mnist_idx,
    mnist_to_idx_bytes,
    read_csv,
    stack,
    two_spirals,
    unstack,
    write_csv,
)


class TestTwoSpirals:
    def test_single_point_per_class(self):
        ds = two_spirals(1, noise_std=0.0, turns=1.0)
        np.testing.assert_allclose(ds.features, [[1.0, 0.0], [-1.0, 0.0]], atol=1e-15)
        assert list(ds.labels) == [1, 2]

    def test_size(self):
        ds = two_spirals(240)
        assert (ds.size, ds.dim, ds.num_classes) == (480, 2, 2)
        assert np.bincount(ds.labels).tolist() == [0, 240, 240]

    def test_noiseless_antipodal(self):
        ds = two_spirals(50, noise_std=0.0)
        np.testing.assert_array_equal(ds.features[50:], -ds.features[:50])

    def test_radius_grows_linearly(self):
        ds = two_spirals(10, noise_std=0.0, r_max=2.0)
        np.testing.assert_allclose(np.linalg.norm(ds.features[:10], axis=1),
                                   2.0 * np.arange(1, 11) / 10)

    def test_seeded(self):
        a, b, c = two_spirals(seed=3), two_spirals(seed=3), two_spirals(seed=4)
        assert np.array_equal(a.features, b.features)
        assert not np.array_equal(a.features, c.features)
        clean = two_spirals(noise_std=0.0)
        # seeds only change the noise
        assert np.abs(a.features - clean.features).max() < 0.2
        assert np.abs(c.features - clean.features).max() < 0.2

    def test_rejects(self):
        with pytest.raises(ValueError):
            two_spirals(0)
        with pytest.raises(ValueError):
            two_spirals(5, noise_std=-1)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 2)), [], 2)
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), [1, 2], 2)
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [1, 3], 2)
        with pytest.raises(ValueError):
            Dataset(np.array([[0, np.nan], [0, 0]]), [1, 2], 2)
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [1, 2, 1], 2)

    def test_immutable(self):
        ds = two_spirals(3)
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0
        assert ds.class_slice_dim == 2


class TestStack:
    def test_single(self):
        ds = Dataset([[1.0, 2.0]], [1], 2)
        s, y = stack(ds)
        np.testing.assert_array_equal(s, [1.0, 2.0])

    def test_order(self):
        ds = Dataset([[1.0, 2.0], [3.0, 4.0]], [1, 2], 2)
        np.testing.assert_array_equal(stack(ds)[0], [1, 2, 3, 4])

    @given(st.integers(1, 20), st.integers(2, 6), st.integers(0, 2**31))
    def test_roundtrip(self, D, n, seed):
        rng = np.random.default_rng(seed)
        ds = Dataset(rng.normal(size=(D, n)), rng.integers(1, 3, D), 2)
        back = unstack(*stack(ds), 2)
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)


def _write(path, data, compress=False):
    path.write_bytes(gzip.compress(data) if compress else data)
    return path


class TestIdx:
    def _files(self, tmp_path, D=5, compress=False):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(D, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=D, dtype=np.uint8)
        img = _write(tmp_path / "img", idx_images_bytes(images), compress)
        lab = _write(tmp_path / "lab", idx_labels_bytes(labels), compress)
        return img, lab, images, labels

    @pytest.mark.parametrize("compress", [False, True])
    def test_load(self, tmp_path, compress):
        img, lab, images, labels = self._files(tmp_path, compress=compress)
        ds = load_mnist_idx(img, lab)
        assert (ds.size, ds.dim, ds.num_classes) == (5, 784, 10)
        np.testing.assert_array_equal(ds.labels, labels + 1)
        np.testing.assert_array_equal(ds.features[2], images[2].ravel() / 255.0)
        assert ds.features.min() >= 0 and ds.features.max() <= 1

    def test_limit_prefix(self, tmp_path):
        img, lab, images, labels = self._files(tmp_path, D=7)
        ds = load_mnist_idx(img, lab, limit=3)
        np.testing.assert_array_equal(ds.labels, labels[:3] + 1)
        np.testing.assert_array_equal(ds.features, images[:3].reshape(3, -1) / 255.0)

    def test_header_is_big_endian(self):
        b = idx_labels_bytes(np.array([1, 2, 3]))
        assert b[:8] == b"\x00\x00\x08\x01\x00\x00\x00\x03"

    def test_labels_with_image_magic(self, tmp_path):
        img, _, _, _ = self._files(tmp_path)
        with pytest.raises(IdxMagicError):
            load_mnist_idx(img, img)

    def test_truncated(self, tmp_path):
        img, lab, _, _ = self._files(tmp_path)
        short = _write(tmp_path / "short", img.read_bytes()[:-10])
        with pytest.raises(IdxTruncatedError):
            load_mnist_idx(short, lab)
        with pytest.raises(IdxTruncatedError):
            load_mnist_idx(_write(tmp_path / "tiny", b"\x00\x00\x08"), lab)

    def test_count_mismatch(self, tmp_path):
        img, _, _, labels = self._files(tmp_path)
        lab = _write(tmp_path / "lab4", idx_labels_bytes(labels[:4]))
        with pytest.raises(IdxCountMismatch):
            load_mnist_idx(img, lab)

    def test_errors_are_distinct(self):
        assert len({IdxMagicError, IdxTruncatedError, IdxCountMismatch}) == 3
        assert not issubclass(IdxMagicError, IdxTruncatedError)

    def test_roundtrip_reproduces_prefix(self, tmp_path):
        img, lab, _, _ = self._files(tmp_path, D=9)
        ds = load_mnist_idx(img, lab, limit=4)
        ib, lb = mnist_to_idx_bytes(ds)
        full_i, full_l = img.read_bytes(), lab.read_bytes()
        assert ib[16:] == full_i[16:16 + 4 * 784]
        assert ib[:16] == full_i[:4] + struct.pack(">I", 4) + full_i[8:16]
        assert lb[8:] == full_l[8:12]

    def test_bundled_sample(self, mnist_idx):
        ds = load_mnist_idx(*mnist_idx, limit=2000)
        assert ds.size == 2000
        assert np.bincount(ds.labels, minlength=11)[1:].tolist() == [200] * 10
        ib, lb = mnist_to_idx_bytes(ds)
        with open(mnist_idx[0], "rb") as fh:
            assert ib[16:] == fh.read()[16:16 + 2000 * 784]


class TestCsv:
    def test_roundtrip(self, tmp_path):
        ds = two_spirals(20)
        write_csv(tmp_path / "d.csv", ds)
        text = (tmp_path / "d.csv").read_text()
        assert text.startswith("x1,x2,label\n") and text.endswith("\n")
        back = read_csv(tmp_path / "d.csv", 2)
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)
