"""Survival feature matrices: clinical columns, mask counts, slice count, eGFR."""
from dataclasses import dataclass

import numpy as np

from .tabular_io import FeatureMatrix
from .volume_io import LABEL_VALUES

CLINICAL_COLUMNS = [
    "CenterID", "Gender", "Age", "Weight", "Tobacco", "Alcohol",
    "Performance_status", "HPV_status", "Surgery", "Chemotherapy",
]
IMAGE_COLUMNS = ["Count0", "Count1", "Count2", "dim_z"]
GENDER_CODE = {"M": 0, "F": 1}
FEMALE_FACTOR = 0.85


@dataclass(frozen=True)
class ImageFeatures:
    count0: int
    count1: int
    count2: int
    dim_z: int

    def __post_init__(self):
        if min(self.count0, self.count1, self.count2) < 0:
            raise ValueError("counts must be >= 0")
        if self.dim_z < 1:
            raise ValueError("dim_z must be >= 1")

    def as_row(self):
        return [self.count0, self.count1, self.count2, self.dim_z]


@dataclass(frozen=True)
class KidneyParams:
    """Average serum creatinine in mg/dL used in place of a measured value."""

    scr_male: float = 0.9
    scr_female: float = 0.7

    def __post_init__(self):
        if self.scr_male <= 0 or self.scr_female <= 0:
            raise ValueError("creatinine values must be > 0")


def mask_pixel_counts(mask):
    """Voxel count of each class in a label volume."""
    counts = np.bincount(mask.voxels.ravel(), minlength=len(LABEL_VALUES))
    return tuple(int(c) for c in counts[: len(LABEL_VALUES)])


def z_dim(ct):
    return int(ct.geometry.nz)


def image_features(mask, ct):
    """Counts from ``mask`` plus the slice count of the original ``ct``."""
    return ImageFeatures(*mask_pixel_counts(mask), z_dim(ct))


def egfr_cockcroft_gault(age, weight, gender, kp=KidneyParams()):
    """Creatinine clearance in mL/min from age (y), weight (kg) and gender."""
    if age >= 140:
        raise ValueError(f"age {age} gives a non-positive clearance")
    if weight <= 0:
        raise ValueError("weight must be > 0")
    if gender not in GENDER_CODE:
        raise ValueError(f"unknown gender {gender!r}")
    scr = kp.scr_female if gender == "F" else kp.scr_male
    e = (140.0 - age) * weight / (72.0 * scr)
    return e * FEMALE_FACTOR if gender == "F" else e


def approach_columns(approach):
    if approach == 1:
        return list(CLINICAL_COLUMNS)
    if approach == 2:
        return CLINICAL_COLUMNS + IMAGE_COLUMNS
    if approach == 3:
        return [c for c in CLINICAL_COLUMNS if c != "Alcohol"] + IMAGE_COLUMNS + ["eGFR"]
    raise ValueError(f"approach must be 1, 2 or 3, got {approach}")


def _clinical(r):
    return {
        "CenterID": r.center_id,
        "Gender": GENDER_CODE[r.gender],
        "Age": r.age,
        "Weight": r.weight,
        "Tobacco": r.tobacco,
        "Alcohol": r.alcohol,
        "Performance_status": r.performance_status,
        "HPV_status": r.hpv_status,
        "Surgery": r.surgery,
        "Chemotherapy": r.chemotherapy,
    }


def build_feature_matrix(records, image_feats=None, approach=1, kp=KidneyParams()):
    """One row per record, in record order.

    ``image_feats`` maps patient id to :class:`ImageFeatures` and is required
    for approaches 2 and 3.  RFS and Relapse become the target and events
    when every record has them.
    """
    records = list(records)
    cols = approach_columns(approach)
    rows = []
    for r in records:
        d = _clinical(r)
        if approach >= 2:
            f = (image_feats or {}).get(r.patient_id)
            if f is None:
                raise KeyError(f"no image features for patient {r.patient_id}")
            d.update(zip(IMAGE_COLUMNS, f.as_row()))
        if approach == 3:
            d["eGFR"] = egfr_cockcroft_gault(r.age, r.weight, r.gender, kp)
        rows.append([np.nan if d[c] is None else float(d[c]) for c in cols])
    target = events = None
    if records and all(r.rfs is not None for r in records):
        target = np.array([r.rfs for r in records], dtype=np.float64)
        events = np.array([np.nan if r.relapse is None else r.relapse for r in records], dtype=np.float64)
    values = np.array(rows, dtype=np.float64).reshape(len(records), len(cols))
    return FeatureMatrix(cols, values, target, events, [r.patient_id for r in records])
