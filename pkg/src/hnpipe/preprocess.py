"""Resampling, normalisation, slice extraction, rebalancing, splitting and
augmentation of CT/PET/mask volumes."""
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import kernels
from .volume_io import CONTINUOUS, Volume, VolumeGeometry

SLICE_SIZE = 256


@dataclass(frozen=True)
class ResampleSpec:
    spacing: tuple = (2.0, 2.0, 2.0)
    interpolation: Optional[str] = None  # None: trilinear for continuous, nearest for labels

    def __post_init__(self):
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"target spacing must be three positive numbers, got {self.spacing}")
        if self.interpolation not in (None, "trilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class SliceSample:
    patient_id: str
    z: int
    channels: list
    label: np.ndarray
    tags: tuple = field(default_factory=tuple)

    @property
    def is_positive(self):
        return bool((self.label > 0).any())


def round_half_away(x):
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def resampled_geometry(g, spacing):
    tx, ty, tz = (float(s) for s in spacing)
    dims = [max(1, round_half_away(n * s / t)) for n, s, t in zip(g.shape, g.spacing, (tx, ty, tz))]
    return VolumeGeometry(*dims, tx, ty, tz, g.ox, g.oy, g.oz)


def _source_coords(src, dst):
    """Per-axis source index positions of every output voxel centre."""
    out = []
    for n_out, t, o_dst, s, o_src in zip(dst.shape, dst.spacing, dst.origin, src.spacing, src.origin):
        out.append((o_dst + np.arange(n_out) * t - o_src) / s)
    return out


def resample_to_geometry(v, target, interpolation=None):
    if interpolation is None:
        interpolation = "nearest" if v.is_label else "trilinear"
    if v.is_label and interpolation != "nearest":
        raise ValueError("label volumes can only be resampled with nearest neighbour")
    cx, cy, cz = _source_coords(v.geometry, target)
    if interpolation == "nearest":
        idx = [np.clip(np.floor(c + 0.5).astype(np.int64), 0, n - 1) for c, n in zip((cx, cy, cz), v.geometry.shape)]
        vox = v.voxels[np.ix_(*idx)]
    else:
        vox = kernels.trilinear(v.voxels, cx, cy, cz)
    return Volume(target, vox, v.kind)


def resample(v, spec=ResampleSpec()):
    """Resample to ``spec.spacing``; dims are round-half-away(n * s / t), min 1."""
    target = resampled_geometry(v.geometry, spec.spacing)
    if target.shape == v.geometry.shape and target.spacing == v.geometry.spacing:
        vox = v.voxels.copy() if v.is_label else v.voxels.astype(np.float64)
        return Volume(target, vox, v.kind)
    return resample_to_geometry(v, target, spec.interpolation)


def normalize_255(v):
    if v.is_label:
        raise ValueError("normalize_255 expects a continuous volume")
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return Volume(v.geometry, np.zeros_like(x), CONTINUOUS)
    y = (x - lo) / (hi - lo) * 255.0
    return Volume(v.geometry, y, CONTINUOUS)


# ---------------------------------------------------------------------------
# in-plane resizing as separable interpolation matrices


@lru_cache(maxsize=64)
def bilinear_matrix(n_in, n_out):
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    f[i0 == n_in - 1] = 0.0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def nearest_index(n_in, n_out):
    idx = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
    idx.setflags(write=False)
    return idx


def resize_bilinear(img, shape):
    h, w = img.shape
    return bilinear_matrix(h, shape[0]) @ np.asarray(img, dtype=np.float64) @ bilinear_matrix(w, shape[1]).T


def resize_nearest(img, shape):
    h, w = img.shape
    return np.asarray(img)[np.ix_(nearest_index(h, shape[0]), nearest_index(w, shape[1]))]


def _slice(v, z):
    return v.voxels[:, :, z].T  # rows = y, columns = x


def extract_slices(ct, pet, mask, arch, patient_id="", size=SLICE_SIZE):
    """One :class:`SliceSample` per axial slice, resized to ``size`` x ``size``."""
    if arch not in (1, 2, 3):
        raise ValueError(f"arch must be 1, 2 or 3, got {arch}")
    vols = [ct, mask] + ([pet] if pet is not None else [])
    if arch in (2, 3) and pet is None:
        raise ValueError(f"arch {arch} needs a PET volume")
    ref = ct.geometry
    for v in vols[1:]:
        g = v.geometry
        if g.shape != ref.shape or not np.allclose(g.spacing, ref.spacing):
            raise ValueError(f"geometry mismatch: {g.shape}/{g.spacing} vs {ref.shape}/{ref.spacing}")
    out = []
    for z in range(ref.nz):
        c = resize_bilinear(_slice(ct, z), (size, size))
        lab = resize_nearest(_slice(mask, z), (size, size)).astype(np.uint8)
        if arch == 1:
            chans, tags = [c], ("CT",)
        else:
            p = resize_bilinear(_slice(pet, z), (size, size))
            if arch == 2:
                chans, tags = [c, p, 0.5 * (c + p)], ("CT", "PET", "MEAN")
            else:
                chans, tags = [c, p], ("CT", "PET")
        out.append(SliceSample(patient_id, z, chans, lab, tags))
    return out


def rebalance(samples, seed):
    """All positive slices plus an equal number (or all, if fewer) of negatives."""
    pos = [s for s in samples if s.is_positive]
    neg = [s for s in samples if not s.is_positive]
    if not neg:
        return list(pos)
    rng = np.random.default_rng(seed)
    k = min(len(pos), len(neg))
    picked = rng.choice(len(neg), size=k, replace=False)
    merged = pos + [neg[i] for i in sorted(picked)]
    return [merged[i] for i in rng.permutation(len(merged))]


def validation_filter(samples):
    return [s for s in samples if ((s.label == 1) | (s.label == 2)).any()]


def split_patients(ids, cfg=SplitConfig()):
    ids = list(ids)
    n = len(ids)
    if n < 2:
        raise ValueError("need at least 2 patients to split")
    n_train = min(max(round_half_away(cfg.train_fraction * n), 1), n - 1)
    order = np.random.default_rng(cfg.seed).permutation(n)
    train = [ids[i] for i in sorted(order[:n_train])]
    val = [ids[i] for i in sorted(order[n_train:])]
    return train, val


def augment(sample, seed, flip=None, angle=None):
    """Random horizontal flip (p=0.5) then rotation in [-10, 10] degrees.

    ``flip`` / ``angle`` override the random draws; both draws are always
    consumed so the stream stays aligned.
    """
    rng = np.random.default_rng(seed)
    do_flip = rng.random() < 0.5
    theta = rng.uniform(-10.0, 10.0)
    if flip is not None:
        do_flip = bool(flip)
    if angle is not None:
        theta = float(angle)
    chans = [np.asarray(c, dtype=np.float64) for c in sample.channels]
    lab = np.asarray(sample.label)
    if do_flip:
        chans = [c[:, ::-1] for c in chans]
        lab = lab[:, ::-1]
    if theta != 0.0:
        chans = [kernels.rotate(c, theta) for c in chans]
        lab = kernels.rotate(lab, theta, nearest=True)
    return SliceSample(
        sample.patient_id, sample.z, [np.ascontiguousarray(c) for c in chans],
        np.ascontiguousarray(lab, dtype=np.uint8), sample.tags,
    )
