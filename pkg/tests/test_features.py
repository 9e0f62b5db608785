import numpy as np
import pytest

from hnpipe.features import (
    ImageFeatures, KidneyParams, approach_columns, build_feature_matrix, egfr_cockcroft_gault,
    image_features, mask_pixel_counts, z_dim,
)
from hnpipe.tabular_io import PatientRecord
from hnpipe.volume_io import LABEL, Volume, VolumeGeometry


def test_counts():
    g = VolumeGeometry(4, 4, 4)
    assert mask_pixel_counts(Volume(g, np.zeros((4, 4, 4)), LABEL)) == (64, 0, 0)
    m = np.zeros(64, dtype=np.uint8)
    m[:5] = 1
    m[10:13] = 2
    assert mask_pixel_counts(Volume(g, m, LABEL)) == (56, 5, 3)


def test_z_dim():
    assert z_dim(Volume(VolumeGeometry(64, 64, 10), np.zeros((64, 64, 10)))) == 10
    assert z_dim(Volume(VolumeGeometry(3, 3, 1), np.zeros((3, 3, 1)))) == 1


def test_egfr_examples():
    kp = KidneyParams(1.0, 1.0)
    assert egfr_cockcroft_gault(60, 80, "M", kp) == pytest.approx(6400 / 72)
    assert egfr_cockcroft_gault(60, 80, "F", kp) == pytest.approx(6400 / 72 * 0.85)
    assert egfr_cockcroft_gault(139.99, 80, "M") > 0
    with pytest.raises(ValueError):
        egfr_cockcroft_gault(140, 80, "M")
    with pytest.raises(ValueError):
        KidneyParams(0.0, 1.0)


def test_egfr_monotone():
    rng = np.random.default_rng(0)
    for _ in range(200):
        age, w = rng.uniform(18, 130), rng.uniform(30, 150)
        g = "M" if rng.random() < 0.5 else "F"
        e = egfr_cockcroft_gault(age, w, g)
        assert egfr_cockcroft_gault(age + 1, w, g) < e < egfr_cockcroft_gault(age, w + 1, g)
        kp = KidneyParams(1.0, 1.0)
        assert egfr_cockcroft_gault(age, w, "F", kp) <= egfr_cockcroft_gault(age, w, "M", kp)


def _records():
    return [
        PatientRecord("A", 1, "M", 60.0, 80.0, 1, None, 0, 1, None, 1, 700.0, 1),
        PatientRecord("B", 2, "F", 50.0, 60.0, None, 1, None, 0, 1, 0, 900.0, 0),
    ]


def test_columns_per_approach():
    assert len(approach_columns(1)) == 10
    assert len(approach_columns(2)) == 14 and approach_columns(2)[-4:] == ["Count0", "Count1", "Count2", "dim_z"]
    c3 = approach_columns(3)
    assert len(c3) == 14 and "Alcohol" not in c3 and c3[-1] == "eGFR"
    assert all("RFS" not in approach_columns(k) and "PatientID" not in approach_columns(k) for k in (1, 2, 3))


def test_build_matrix():
    img = {"A": ImageFeatures(100, 5, 3, 10), "B": ImageFeatures(90, 7, 11, 12)}
    m1 = build_feature_matrix(_records(), approach=1)
    assert m1.row_ids == ["A", "B"] and m1.column("Gender").tolist() == [0, 1]
    assert np.isnan(m1.column("Alcohol")[0]) and m1.target.tolist() == [700, 900]
    m3 = build_feature_matrix(_records(), img, 3)
    assert m3.column("Count2").tolist() == [3, 11]
    assert m3.column("eGFR")[1] == pytest.approx(90 * 60 / (72 * 0.7) * 0.85)
    with pytest.raises(KeyError):
        build_feature_matrix(_records(), {"A": img["A"]}, 2)


def test_image_features_sum():
    g = VolumeGeometry(5, 4, 3)
    m = Volume(g, np.random.default_rng(0).integers(0, 3, (5, 4, 3)), LABEL)
    f = image_features(m, Volume(g, np.zeros((5, 4, 3))))
    assert f.count0 + f.count1 + f.count2 == 60 and f.dim_z == 3
