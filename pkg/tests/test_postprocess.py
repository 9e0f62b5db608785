import numpy as np
import pytest

from hnpipe.postprocess import cubic_matrix, cubic_weight, reconstruct_prediction, resize_cubic
from hnpipe.volume_io import VolumeGeometry


def test_catmull_rom_midpoint():
    w = cubic_weight(np.array([-1.5, -0.5, 0.5, 1.5]))
    assert np.allclose(w, [-0.0625, 0.5625, 0.5625, -0.0625])
    assert float(w @ np.array([0.0, 0.0, 1.0, 0.0])) == pytest.approx(0.5625)


def test_kernel_interpolates():
    assert cubic_weight(0.0) == 1.0 and cubic_weight(1.0) == 0.0 and cubic_weight(2.0) == 0.0


def test_cubic_rows_sum_to_one_and_identity():
    for n_in, n_out in ((256, 80), (256, 64), (5, 17)):
        assert np.allclose(cubic_matrix(n_in, n_out).sum(axis=1), 1.0)
    assert np.allclose(cubic_matrix(7, 7), np.eye(7))
    img = np.random.default_rng(0).uniform(size=(6, 6))
    assert np.allclose(resize_cubic(img, (6, 6)), img)


def test_one_hot_identity_chain():
    rng = np.random.default_rng(1)
    g = VolumeGeometry(16, 16, 3)
    labels = rng.integers(0, 3, (16, 16, 3))
    probs = [np.eye(3)[labels[:, :, z].T] for z in range(3)]
    out = reconstruct_prediction(probs, g, g)
    assert out.geometry == g and np.array_equal(out.voxels, labels)


def test_constant_probabilities_constant_labels():
    g = VolumeGeometry(20, 12, 4, 2, 2, 2)
    orig = VolumeGeometry(16, 10, 3, 2.5, 2.4, 2.7)
    pm = np.zeros((32, 32, 3))
    pm[..., 2] = 0.7
    pm[..., 0] = 0.3
    out = reconstruct_prediction([pm] * 4, g, orig)
    assert out.geometry == orig and (out.voxels == 2).all()


def test_upsampled_one_hot_recovers_downsampled_labels():
    g = VolumeGeometry(64, 64, 2)
    labels = np.zeros((64, 64, 2), dtype=int)
    labels[10:30, 20:40, :] = 1
    labels[40:50, 5:15, 1] = 2
    from hnpipe.preprocess import resize_nearest
    probs = [np.eye(3)[resize_nearest(labels[:, :, z].T, (256, 256))] for z in range(2)]
    out = reconstruct_prediction(probs, g, g)
    assert set(np.unique(out.voxels)) <= {0, 1, 2}
    assert (out.voxels == labels).mean() > 0.99


def test_slice_count_mismatch():
    with pytest.raises(ValueError):
        reconstruct_prediction([np.zeros((4, 4, 3))], VolumeGeometry(4, 4, 2), VolumeGeometry(4, 4, 2))
