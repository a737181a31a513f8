import struct

import numpy as np
import pytest

from dpkfac import data
from dpkfac.errors import ContractError, IdxFormatError


def idx_image_bytes(images):
    n, h, w = images.shape
    return struct.pack(">IIII", 0x00000803, n, h, w) + images.astype(np.uint8).tobytes()


def idx_label_bytes(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.array(
        [[[0, 51], [102, 153]], [[204, 255], [0, 128]]], dtype=np.uint8
    )
    labels = [3, 7]
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labels.idx"
    ip.write_bytes(idx_image_bytes(imgs))
    lp.write_bytes(idx_label_bytes(labels))
    return str(ip), str(lp), imgs, labels


class TestIdx:
    def test_hand_built_fixture(self, idx_pair):
        ip, lp, imgs, labels = idx_pair
        ds = data.load_idx(ip, lp)
        assert ds.x.shape == (2, 1, 2, 2)
        np.testing.assert_allclose(ds.x[:, 0], imgs / 255.0)
        np.testing.assert_array_equal(ds.y, labels)
        assert ds.n_train == 2 and len(ds.test_idx) == 0

    def test_wrong_image_magic(self, tmp_path, idx_pair):
        _, lp, _, _ = idx_pair
        bad = tmp_path / "bad.idx"
        bad.write_bytes(struct.pack(">IIII", 0x00000802, 1, 2, 2) + bytes(4))
        with pytest.raises(IdxFormatError) as err:
            data.load_idx(str(bad), lp)
        assert err.value.offset == 0

    def test_truncated_image_payload(self, tmp_path, idx_pair):
        _, lp, _, _ = idx_pair
        short = tmp_path / "short.idx"
        short.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + bytes(5))
        with pytest.raises(IdxFormatError, match="truncated"):
            data.load_idx(str(short), lp)

    def test_truncated_labels(self, tmp_path, idx_pair):
        ip, _, _, _ = idx_pair
        short = tmp_path / "short-labels.idx"
        short.write_bytes(struct.pack(">II", 0x00000801, 9) + bytes(2))
        with pytest.raises(IdxFormatError, match="truncated"):
            data.load_idx(ip, str(short))

    def test_count_mismatch(self, tmp_path, idx_pair):
        ip, _, _, _ = idx_pair
        three = tmp_path / "three.idx"
        three.write_bytes(idx_label_bytes([1, 2, 3]))
        with pytest.raises(IdxFormatError, match="does not match"):
            data.load_idx(ip, str(three))

    def test_merge_splits(self, idx_pair, tmp_path):
        ip, lp, _, _ = idx_pair
        train = data.load_idx(ip, lp)
        test = data.load_idx(ip, lp)
        ds = data.merge_splits(train, test)
        assert ds.n_train == 2 and len(ds.test_idx) == 2
        np.testing.assert_array_equal(ds.train_x, ds.test_x)


class TestBlobs:
    def test_deterministic(self):
        a = data.gen_blobs(100, 8, 4, 0.5, seed=3)
        b = data.gen_blobs(100, 8, 4, 0.5, seed=3)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    def test_class_balance_within_one(self):
        ds = data.gen_blobs(103, 8, 4, 0.5, seed=1)
        counts = np.bincount(ds.y)
        assert counts.max() - counts.min() <= 1
        train_counts = np.bincount(ds.train_y, minlength=4)
        assert train_counts.max() - train_counts.min() <= 1

    def test_split_80_20_disjoint(self):
        ds = data.gen_blobs(200, 8, 4, 0.5, seed=2)
        assert len(ds.test_idx) == 40 and len(ds.train_idx) == 160
        assert not set(ds.test_idx) & set(ds.train_idx)

    def test_standardized_features(self):
        ds = data.gen_blobs(2000, 8, 4, 0.7, seed=4)
        mu = ds.train_x.mean(axis=0)
        sd = ds.train_x.std(axis=0)
        assert np.abs(mu).max() <= 1e-10
        np.testing.assert_allclose(sd, 1.0, atol=1e-10)
        assert ds.normalization["kind"] == "standardize"

    def test_noise_free_is_separable(self):
        ds = data.gen_blobs(80, 8, 4, 0.0, seed=5)
        # every sample sits exactly on its class mean: nearest-centroid is exact,
        # and 200 steps of plain softmax regression reach 100% train accuracy
        from dpkfac import nn, trainer
        from dpkfac.rng import Rng

        m = nn.Model.initialized([nn.Linear(8, 4)], Rng(0))
        x, y = ds.train_x, ds.train_y
        for _ in range(200):
            _, g = nn.batch_grad(m, x, y)
            m.set_flat_params(m.flat_params() - 0.5 * g)
        assert trainer.evaluate(m, x, y) == 1.0

    def test_image_shape(self):
        ds = data.gen_blobs(50, 64, 5, 0.5, seed=6, image_shape=(1, 8, 8))
        assert ds.x.shape == (50, 1, 8, 8)
        with pytest.raises(ContractError):
            data.gen_blobs(50, 64, 5, 0.5, seed=6, image_shape=(2, 8, 8))

    def test_validation(self):
        with pytest.raises(ContractError):
            data.gen_blobs(10, 8, 1, 0.5, seed=0)
        with pytest.raises(ContractError):
            data.gen_blobs(10, 2, 4, 0.5, seed=0)

    def test_subsample_deterministic(self):
        ds = data.gen_blobs(500, 8, 4, 0.5, seed=7)
        s1 = data.subsample_train(ds, 100, seed=1)
        s2 = data.subsample_train(ds, 100, seed=1)
        np.testing.assert_array_equal(s1.train_idx, s2.train_idx)
        assert s1.n_train == 100
        assert len(s1.test_idx) == len(ds.test_idx)
