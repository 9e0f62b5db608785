"""Map 256x256 slice probabilities back onto the original CT grid."""
from functools import lru_cache

import numpy as np

from .preprocess import resample_to_geometry
from .volume_io import CONTINUOUS, LABEL, Volume


def cubic_weight(x, a=-0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    far = ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def cubic_matrix(n_in, n_out, a=-0.5):
    """Rows hold the four cubic-convolution taps of each output sample.

    Pixel centres are aligned (``src = (dst + 0.5) * n_in / n_out - 0.5``)
    and out-of-range taps replicate the border sample.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    t = src - base
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k, off in enumerate((-1, 0, 1, 2)):
        w = cubic_weight(t - off, a)
        np.add.at(m, (rows, np.clip(base + off, 0, n_in - 1)), w)
    m.setflags(write=False)
    return m


def resize_cubic(img, shape, a=-0.5):
    h, w = img.shape
    return cubic_matrix(h, shape[0], a) @ np.asarray(img, dtype=np.float64) @ cubic_matrix(w, shape[1], a).T


def reconstruct_prediction(prob_maps, resampled, original, a=-0.5):
    """Slice probabilities (one ``(H, W, 3)`` map per resampled z) -> label Volume.

    Probabilities are interpolated, clamped and only then arg-maxed so cubic
    overshoot can never create an invalid class.
    """
    if len(prob_maps) != resampled.nz:
        raise ValueError(f"got {len(prob_maps)} probability maps for {resampled.nz} slices")
    n_cls = prob_maps[0].shape[-1] if prob_maps else 3
    stack = np.empty((n_cls, resampled.nx, resampled.ny, resampled.nz))
    for z, pm in enumerate(prob_maps):
        for c in range(n_cls):
            stack[c, :, :, z] = resize_cubic(pm[..., c], (resampled.ny, resampled.nx), a).T
    probs = []
    for c in range(n_cls):
        v = Volume(resampled, stack[c], CONTINUOUS)
        if resampled != original:
            v = resample_to_geometry(v, original, "trilinear")
        probs.append(np.clip(v.voxels, 0.0, 1.0))
    labels = np.argmax(np.stack(probs, axis=-1), axis=-1).astype(np.uint8)
    return Volume(original, labels, LABEL)
