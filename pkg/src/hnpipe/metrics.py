"""Evaluation metrics for both tasks."""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels

CLASSES = (1, 2)


def _check_same_geometry(pred, gt):
    if pred.geometry.shape != gt.geometry.shape:
        raise ValueError(f"geometry mismatch: {pred.geometry.shape} vs {gt.geometry.shape}")


def _counts(pred, gt, c):
    p = pred.voxels == c
    g = gt.voxels == c
    return int((p & g).sum()), int(p.sum()), int(g.sum())


def dice(pred, gt, c):
    """2|P∩G| / (|P|+|G|) for class ``c``; 1.0 when both are empty."""
    _check_same_geometry(pred, gt)
    inter, np_, ng = _counts(pred, gt, c)
    return 1.0 if np_ + ng == 0 else 2.0 * inter / (np_ + ng)


def iou(pred, gt, c):
    _check_same_geometry(pred, gt)
    inter, np_, ng = _counts(pred, gt, c)
    union = np_ + ng - inter
    return 1.0 if union == 0 else inter / union


@dataclass
class SegScore:
    dice: dict  # class -> list of per-patient Dice
    aggregated_dice: dict  # class -> pooled Dice
    mean_aggregated_dice: float
    iou: dict  # class -> list of per-patient IoU
    patient_ids: list = field(default_factory=list)


def aggregated_dice(cohort, patient_ids=None):
    """Pool intersections and sizes over patients per class, then macro-average."""
    cohort = list(cohort)
    if not cohort:
        raise ValueError("empty cohort")
    per_dice = {c: [] for c in CLASSES}
    per_iou = {c: [] for c in CLASSES}
    agg = {}
    for c in CLASSES:
        inter_sum = size_sum = 0
        for pred, gt in cohort:
            _check_same_geometry(pred, gt)
            inter, np_, ng = _counts(pred, gt, c)
            inter_sum += inter
            size_sum += np_ + ng
            per_dice[c].append(1.0 if np_ + ng == 0 else 2.0 * inter / (np_ + ng))
            union = np_ + ng - inter
            per_iou[c].append(1.0 if union == 0 else inter / union)
        agg[c] = 1.0 if size_sum == 0 else 2.0 * inter_sum / size_sum
    mean = sum(agg.values()) / len(CLASSES)
    return SegScore(per_dice, agg, mean, per_iou, list(patient_ids or []))


def seg_report_csv(score, label=""):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["model", "patient", "dice_gtvp", "dice_gtvn", "iou_gtvp", "iou_gtvn"])
    ids = score.patient_ids or [str(i) for i in range(len(score.dice[1]))]
    for i, pid in enumerate(ids):
        w.writerow([label, pid, repr(float(score.dice[1][i])), repr(float(score.dice[2][i])), repr(float(score.iou[1][i])), repr(float(score.iou[2][i]))])
    w.writerow([label, "AGGREGATED", repr(float(score.aggregated_dice[1])), repr(float(score.aggregated_dice[2])), "", ""])
    return out.getvalue()


def rmse(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("rmse of empty vectors")
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def c_index(scores, times, events=None):
    """Harrell's concordance with higher predicted RFS meaning lower risk.

    A pair (i, j) is comparable when ``times[i] < times[j]`` and patient i
    had the event; it is concordant when ``scores[i] < scores[j]`` and counts
    one half on a score tie.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.ones_like(t) if events is None else np.asarray(events, dtype=np.float64)
    if not s.shape == t.shape == e.shape:
        raise ValueError("scores, times and events must have equal lengths")
    if s.size < 2:
        raise ValueError("c_index needs at least 2 samples")
    conc, ties, comp = kernels.concordance_counts(s, t, e)
    if comp == 0:
        raise ValueError("no comparable pairs")
    return (conc + 0.5 * ties) / comp


@dataclass
class CorrelationResult:
    names: list
    matrix: np.ndarray
    undefined: np.ndarray  # fewer than 2 complete rows for the pair
    zero_variance: np.ndarray  # pair had a constant column


def pearson_corr_matrix(values, names=None):
    """Pairwise-complete Pearson correlation of the columns of ``values``."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-D matrix with at least 2 rows")
    k = x.shape[1]
    r = np.eye(k)
    undefined = np.zeros((k, k), dtype=bool)
    zero_var = np.zeros((k, k), dtype=bool)
    for i in range(k):
        for j in range(i + 1, k):
            ok = ~np.isnan(x[:, i]) & ~np.isnan(x[:, j])
            if ok.sum() < 2:
                undefined[i, j] = undefined[j, i] = True
                r[i, j] = r[j, i] = np.nan
                continue
            a = x[ok, i] - x[ok, i].mean()
            b = x[ok, j] - x[ok, j].mean()
            saa, sbb = float(a @ a), float(b @ b)
            if saa == 0.0 or sbb == 0.0:
                zero_var[i, j] = zero_var[j, i] = True
                val = 0.0
            else:
                val = float(np.clip((a @ b) / np.sqrt(saa * sbb), -1.0, 1.0))
            r[i, j] = r[j, i] = val
    return CorrelationResult(list(names) if names is not None else [str(i) for i in range(k)], r, undefined, zero_var)
