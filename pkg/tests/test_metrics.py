import itertools

import numpy as np
import pytest

from hnpipe.metrics import aggregated_dice, c_index, dice, iou, pearson_corr_matrix, rmse, seg_report_csv
from hnpipe.volume_io import LABEL, Volume, VolumeGeometry


def lab(arr):
    arr = np.asarray(arr)
    return Volume(VolumeGeometry(*arr.shape), arr, LABEL)


def test_dice_and_iou_basics():
    a = lab(np.array([1, 1, 0, 0]).reshape(4, 1, 1))
    b = lab(np.array([1, 0, 1, 0]).reshape(4, 1, 1))
    assert dice(a, b, 1) == 0.5 and iou(a, b, 1) == pytest.approx(1 / 3)
    assert dice(a, b, 2) == 1.0 and iou(a, b, 2) == 1.0
    with pytest.raises(ValueError):
        dice(a, lab(np.zeros((2, 1, 1))), 1)


def test_aggregated_dice_pools_counts():
    p1 = lab(np.array([1, 1, 1, 1]).reshape(4, 1, 1))
    g1 = lab(np.array([1, 0, 0, 0]).reshape(4, 1, 1))
    p2 = lab(np.array([0, 0, 2, 0]).reshape(4, 1, 1))
    g2 = lab(np.array([0, 0, 2, 0]).reshape(4, 1, 1))
    sc = aggregated_dice([(p1, g1), (p2, g2)], ["a", "b"])
    assert sc.aggregated_dice[1] == pytest.approx(2 * 1 / (4 + 1))
    assert sc.aggregated_dice[2] == 1.0
    assert sc.mean_aggregated_dice == pytest.approx((0.4 + 1.0) / 2)
    csv = seg_report_csv(sc, "m")
    assert csv.splitlines()[0].startswith("model,patient") and "AGGREGATED" in csv


def test_dice_counts_example():
    p = lab(np.array([1, 1, 0, 0, 0]).reshape(5, 1, 1))
    g = lab(np.array([1, 1, 1, 0, 0]).reshape(5, 1, 1))
    assert dice(p, g, 1) == pytest.approx(0.8)
    assert dice(g, p, 1) == dice(p, g, 1) and iou(g, p, 1) == iou(p, g, 1)
    assert aggregated_dice([(p, g)]).aggregated_dice[1] == dice(p, g, 1)


def test_aggregated_dice_equal_size_tumours():
    g = lab(np.array([1, 1, 0, 0]).reshape(4, 1, 1))
    miss = lab(np.array([0, 0, 1, 1]).reshape(4, 1, 1))
    assert aggregated_dice([(g, g), (miss, g)]).aggregated_dice[1] == 0.5


def brute_pooled(cohort, c):
    inter = size = 0
    for p, g in cohort:
        for a, b in zip(p.voxels.ravel(), g.voxels.ravel()):
            inter += int(a == c and b == c)
            size += int(a == c) + int(b == c)
    return 1.0 if size == 0 else 2 * inter / size


def test_aggregated_dice_random_cohorts():
    rng = np.random.default_rng(11)
    for _ in range(20):
        cohort = [(lab(rng.integers(0, 3, (8, 8, 2))), lab(rng.integers(0, 3, (8, 8, 2)))) for _ in range(int(rng.integers(1, 5)))]
        sc = aggregated_dice(cohort)
        for c in (1, 2):
            assert sc.aggregated_dice[c] == brute_pooled(cohort, c)


def test_rmse():
    assert rmse([5, 5, 5], [2, 2, 2]) == 3.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        rmse([1], [1, 2])


def brute_c_index(s, t, e):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(s)), 2):
        if t[i] < t[j] and e[i] == 1:
            den += 1
            num += 1.0 if s[i] < s[j] else 0.5 if s[i] == s[j] else 0.0
    return num / den


def test_c_index_examples():
    assert c_index([2, 1, 3], [1, 2, 3]) == pytest.approx(2 / 3)
    assert c_index([1, 2, 3], [1, 2, 3]) == 1.0
    assert c_index([3, 2, 1], [1, 2, 3]) == 0.0
    assert c_index([1, 1, 1], [1, 2, 3]) == 0.5
    assert c_index([1, 2, 3], [1, 2, 3], [0, 1, 1]) == 1.0
    with pytest.raises(ValueError):
        c_index([1, 2], [5, 5])


def test_c_index_random_against_pairs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 21))
        s = rng.integers(0, 5, n).astype(float)
        t = rng.integers(0, 8, n).astype(float)
        e = rng.integers(0, 2, n).astype(float)
        e[np.argmin(t)] = 1
        if not any(t[i] < t[j] and e[i] == 1 for i in range(n) for j in range(n)):
            continue
        assert c_index(s, t, e) == brute_c_index(s, t, e)


def test_pearson():
    r = pearson_corr_matrix(np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 4.0]]))
    assert r.matrix[0, 1] == pytest.approx(0.98198, abs=1e-5) and np.allclose(np.diag(r.matrix), 1)
    r = pearson_corr_matrix(np.array([[1.0, -1.0], [2.0, -2.0], [3.0, -3.0]]))
    assert r.matrix[0, 1] == pytest.approx(-1.0)
    r = pearson_corr_matrix(np.array([[1.0, 5.0, np.nan], [2.0, 5.0, 1.0], [3.0, 5.0, np.nan]]))
    assert r.zero_variance[0, 1] and r.matrix[0, 1] == 0.0
    assert r.undefined[0, 2] and np.isnan(r.matrix[0, 2])


def test_pearson_pairwise_complete():
    x = np.array([[1.0, 2.0], [2.0, np.nan], [3.0, 6.0], [4.0, 8.0]])
    assert pearson_corr_matrix(x).matrix[0, 1] == pytest.approx(1.0)
