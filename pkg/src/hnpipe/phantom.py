"""Deterministic synthetic head-and-neck cohort.

Each patient gets one ellipsoidal primary tumour (label 1) and one nodal
tumour (label 2) with disjoint supports, a CT and a PET volume with additive
tumour contrast plus Gaussian noise, and a clinical row whose RFS is a noisy
linear function of age, weight and total tumour volume.
"""
from dataclasses import dataclass, field

import numpy as np

from .tabular_io import PatientRecord, write_patient_csv
from .volume_io import CONTINUOUS, LABEL, Volume, VolumeGeometry

MAX_PLACEMENT_TRIES = 100


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    n_patients: int = 12
    dims: tuple = (64, 64, 32)
    spacing: tuple = (2.5, 2.5, 2.0)
    gtvp_radius_range: tuple = (8.0, 14.0)  # mm
    gtvn_radius_range: tuple = (7.0, 11.0)  # mm
    ct_baseline: float = 40.0
    ct_tumor_contrast: float = 4.0
    pet_background: float = 10.0
    pet_tumor_contrast: float = 100.0
    gtvn_contrast_ratio: float = 0.5  # nodal contrast relative to primary
    noise_sd: float = 10.0
    # intercept (days), per year of age, per kg, per mL of tumour
    rfs_coefficients: tuple = (2200.0, -15.0, 6.0, -75.0)
    rfs_noise_sd: float = 150.0
    event_rate: float = 0.8
    master_seed: int = 0

    def __post_init__(self):
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        for lo, hi in (self.gtvp_radius_range, self.gtvn_radius_range):
            if not 0 < lo <= hi:
                raise ValueError("tumour radii must satisfy 0 < low <= high")
        if min(self.ct_tumor_contrast, self.pet_tumor_contrast) < 0:
            raise ValueError("contrasts must be >= 0")
        if len(self.rfs_coefficients) != 4:
            raise ValueError("rfs_coefficients = (intercept, age, weight, tumour_ml)")


@dataclass
class PhantomCase:
    patient_id: str
    ct: Volume
    pet: Volume
    label: Volume
    record: PatientRecord
    radii: dict = field(default_factory=dict)  # class -> (rx, ry, rz) in mm


@dataclass
class Cohort:
    cases: list
    csv: bytes

    @property
    def ids(self):
        return [c.patient_id for c in self.cases]


def ellipsoid_mask(geom, center_mm, radii_mm):
    xs = np.arange(geom.nx) * geom.sx - center_mm[0]
    ys = np.arange(geom.ny) * geom.sy - center_mm[1]
    zs = np.arange(geom.nz) * geom.sz - center_mm[2]
    r = ((xs / radii_mm[0])[:, None, None] ** 2
         + (ys / radii_mm[1])[None, :, None] ** 2
         + (zs / radii_mm[2])[None, None, :] ** 2)
    return r <= 1.0


def _place(rng, geom, radii):
    extent = np.array([geom.nx * geom.sx, geom.ny * geom.sy, geom.nz * geom.sz])
    lo = np.asarray(radii) + np.array(geom.spacing)
    hi = extent - lo - np.array(geom.spacing)
    if np.any(hi <= lo):
        return None
    return rng.uniform(lo, hi)


def _one_patient(cfg, idx, rng, geom):
    pid = f"PHT{idx:03d}"
    for _ in range(MAX_PLACEMENT_TRIES):
        rp = tuple(rng.uniform(*cfg.gtvp_radius_range, size=3))
        rn = tuple(rng.uniform(*cfg.gtvn_radius_range, size=3))
        cp = _place(rng, geom, rp)
        cn = _place(rng, geom, rn)
        if cp is None or cn is None:
            continue
        mp = ellipsoid_mask(geom, cp, rp)
        mn = ellipsoid_mask(geom, cn, rn)
        if mp.any() and mn.any() and not (mp & mn).any():
            break
    else:
        raise PlacementError(f"{pid}: could not place disjoint tumours in {MAX_PLACEMENT_TRIES} tries")

    label = np.zeros(geom.shape, dtype=np.uint8)
    label[mp] = 1
    label[mn] = 2
    weight_map = np.where(mp, 1.0, np.where(mn, cfg.gtvn_contrast_ratio, 0.0))
    ct = cfg.ct_baseline + cfg.ct_tumor_contrast * weight_map + rng.normal(0.0, cfg.noise_sd, geom.shape)
    pet = cfg.pet_background + cfg.pet_tumor_contrast * weight_map + rng.normal(0.0, cfg.noise_sd, geom.shape)

    gender = "M" if rng.random() < 0.7 else "F"
    age = float(np.round(rng.uniform(40.0, 80.0), 1))
    weight = float(np.round(np.clip(rng.normal(78.0 if gender == "M" else 66.0, 12.0), 40.0, 140.0), 1))

    def maybe(p_missing, p_one):
        u, v = rng.random(), rng.random()
        return None if u < p_missing else int(v < p_one)

    tobacco = maybe(0.2, 0.6)
    alcohol = maybe(0.7, 0.5)
    perf_u, perf_v = rng.random(), int(rng.integers(0, 4))
    performance = None if perf_u < 0.1 else perf_v
    hpv = maybe(0.3, 0.5)
    surgery = maybe(0.4, 0.3)
    chemo = int(rng.random() < 0.8)
    center = int(rng.integers(1, 8))

    tumour_ml = float((mp.sum() + mn.sum()) * geom.voxel_volume / 1000.0)
    b0, b_age, b_w, b_vol = cfg.rfs_coefficients
    rfs = b0 + b_age * age + b_w * weight + b_vol * tumour_ml + rng.normal(0.0, cfg.rfs_noise_sd)
    rfs = float(max(1.0, np.round(rfs)))
    relapse = int(rng.random() < cfg.event_rate)

    rec = PatientRecord(pid, center, gender, age, weight, tobacco, alcohol, performance, hpv, surgery, chemo, rfs, relapse)
    return PhantomCase(
        pid,
        Volume(geom, ct.astype(np.float32), CONTINUOUS),
        Volume(geom, pet.astype(np.float32), CONTINUOUS),
        Volume(geom, label, LABEL),
        rec,
        {1: rp, 2: rn},
    )


def generate_cohort(cfg=PhantomConfig()):
    geom = VolumeGeometry(*cfg.dims, *cfg.spacing)
    seeds = np.random.SeedSequence(cfg.master_seed).spawn(cfg.n_patients)
    cases = [_one_patient(cfg, i, np.random.default_rng(s), geom) for i, s in enumerate(seeds)]
    return Cohort(cases, write_patient_csv([c.record for c in cases]))
