"""Evaluation and analysis: confusion matrices, IoU, region-proposal PR/AP,
pixel-text similarity maps and semantic-coherence maps."""
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .errors import InputError

IGNORE = 255


def _np(a):
    return a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)


def empty_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate_confusion(pred, gt, cm):
    """Add counts for one (pred, gt) pair; rows are GT, columns predictions."""
    pred, gt = _np(pred).ravel(), _np(gt).ravel()
    k = cm.shape[0]
    keep = gt != IGNORE
    if np.any(pred[keep] >= k) or np.any(gt[keep] >= k):
        raise InputError(f"labels must be < {k}")
    idx = gt[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
    return cm + np.bincount(idx, minlength=k * k).reshape(k, k)


def miou(cm):
    """Per-class IoU (NaN where TP+FP+FN = 0) and their mean over defined classes."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    mean = float(np.nanmean(iou)) if np.any(denom > 0) else float("nan")
    return iou, mean


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    defined: bool = True


def operating_points(scores, gt, thresholds):
    """(precision, recall) of ``scores > theta`` for each threshold."""
    scores, gt = _np(scores).ravel(), _np(gt).ravel().astype(bool)
    n_gt = gt.sum()
    pred = scores[None, :] > np.asarray(thresholds)[:, None]
    tp = (pred & gt[None]).sum(1)
    n_pred = pred.sum(1)
    precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 1.0)
    recall = tp / n_gt if n_gt else np.full(len(thresholds), np.nan)
    return precision, recall


def area_under_pr(precision, recall, method="trapezoid"):
    """AP from a set of operating points.

    ``trapezoid`` dedupes points, orders them as the curve is traced from high
    to low threshold (recall ascending, precision descending on ties) and
    integrates;
    ``11point`` averages the interpolated precision at recall 0, 0.1, ..., 1.
    """
    if method == "11point":
        return float(np.mean([precision[recall >= r].max() if np.any(recall >= r) else 0.0
                              for r in np.linspace(0, 1, 11)]))
    if method != "trapezoid":
        raise ValueError(f"unknown AP method {method!r}")
    pts = sorted(set(zip(recall.tolist(), precision.tolist())), key=lambda rp: (rp[0], -rp[1]))
    area = 0.0
    for (r0, p0), (r1, p1) in zip(pts[:-1], pts[1:]):
        area += (r1 - r0) * (p0 + p1) / 2
    return area


def pr_curve(scores, gt, thresholds=None, method="trapezoid"):
    """PR curve of region proposals ``scores > theta`` against a binary GT mask.

    ``scores`` are sigmoid probabilities; default thresholds are 101 points in
    [0, 1]. An empty GT mask yields ``defined=False`` and NaN AP.
    """
    thresholds = np.linspace(0.0, 1.0, 101) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    precision, recall = operating_points(scores, gt, thresholds)
    if not _np(gt).any():
        return PRCurve(thresholds, precision, recall, float("nan"), defined=False)
    return PRCurve(thresholds, precision, recall, area_under_pr(precision, recall, method))


def proposal_scores(Z, q0):
    """``sigmoid(Z q0^T)``: (H', W', K) region-proposal confidences."""
    return torch.sigmoid(Z @ q0.T)


def resize_bilinear(maps, size):
    """Bilinear resize of (K, h, w) maps with half-pixel centres (no corner alignment)."""
    t = torch.as_tensor(maps)[None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0]


def minmax(maps):
    """Per-channel min-max scaling of (K, H, W); constant channels become 0."""
    flat = maps.reshape(len(maps), -1)
    lo = flat.min(1).values[:, None, None]
    hi = flat.max(1).values[:, None, None]
    span = hi - lo
    return torch.where(span > 0, (maps - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                       torch.zeros_like(maps))


def similarity_map(x, t, grid, out_size):
    """Image-text similarity map: cosine scores (hw x K) reshaped to ``grid``,
    resized to ``out_size`` and min-max scaled per class. Returns (H, W, K)."""
    x, t = torch.as_tensor(x), torch.as_tensor(t)
    S = F.normalize(x, dim=-1) @ F.normalize(t, dim=-1).T
    h, w = grid
    maps = S.T.reshape(-1, h, w)
    return minmax(resize_bilinear(maps, out_size)).permute(1, 2, 0)


def coherence_map(anchor_features, anchor, target_features=None):
    """Cosine similarity between the embedding at ``anchor`` (i, j) and every
    pixel of ``target_features`` (defaults to the anchor's own map).

    Feature maps are (H', W', D).
    """
    src = torch.as_tensor(anchor_features)
    tgt = src if target_features is None else torch.as_tensor(target_features)
    a = F.normalize(src[anchor[0], anchor[1]], dim=-1)
    return F.normalize(tgt, dim=-1) @ a


def write_jsonl(path, rows, mode="w"):
    with open(path, mode) as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_grid_csv(path, grid):
    """A 2-D array as a headerless CSV grid (``repr`` floats: lossless)."""
    g = _np(grid)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in g:
            w.writerow([repr(float(v)) for v in row])


def read_grid_csv(path):
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
