"""Generalized Dice Loss and pixel-level overlap metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GDL_EPS = 1e-6


@dataclass
class GdlWeights:
    weights: np.ndarray   # per class, 0 where excluded
    included: np.ndarray  # bool per class


def gdl_weights(onehot: np.ndarray) -> GdlWeights:
    """Inverse squared ground-truth area per class over the whole batch.

    Classes with no ground-truth pixel are excluded instead of getting 1/0.
    """
    area = onehot.sum(axis=(0, 2, 3)) if onehot.ndim == 4 else onehot.sum(axis=(1, 2))
    included = area > 0
    w = np.zeros(area.shape, dtype=np.float64)
    w[included] = 1.0 / area[included].astype(np.float64) ** 2
    return GdlWeights(w, included)


def generalized_dice_loss(p: np.ndarray, r: np.ndarray, eps: float = GDL_EPS):
    """Generalized Dice Loss of probabilities ``p`` against one-hot ``r``.

    Both are N x C x H x W (a C x H x W array is treated as N=1). Sums run over
    every pixel of the batch. Returns ``(loss, dloss/dp)``::

        loss = 1 - (2 * sum_l w_l sum_n r_ln p_ln + eps) / (sum_l w_l sum_n (r_ln + p_ln) + eps)
    """
    if p.shape != r.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {r.shape}")
    squeeze = p.ndim == 3
    if squeeze:
        p, r = p[None], r[None]
    gw = gdl_weights(r)
    if not gw.included.any():
        raise ValueError("no ground-truth pixels in batch: every class is absent")
    w = gw.weights
    axes = (0, 2, 3)
    inter = (r * p).sum(axis=axes)
    total = r.sum(axis=axes) + p.sum(axis=axes)
    num = 2.0 * np.dot(w, inter) + eps
    den = np.dot(w, total) + eps
    loss = 1.0 - num / den
    wb = w.reshape(1, -1, 1, 1)
    grad = -(2.0 * wb * r * den - num * wb) / den ** 2
    grad = grad.astype(p.dtype, copy=False)
    return float(loss), (grad[0] if squeeze else grad)


# --------------------------------------------------------------------------
# set-overlap metrics
# --------------------------------------------------------------------------

def dice_score(x, y) -> float:
    """2|X & Y| / (|X| + |Y|) for boolean masks; 1.0 when both are empty."""
    x, y = np.asarray(x, bool), np.asarray(y, bool)
    sx, sy = int(x.sum()), int(y.sum())
    if sx + sy == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / (sx + sy)


def jaccard(x, y) -> float:
    """|X & Y| / |X | Y| for boolean masks; 1.0 when both are empty."""
    x, y = np.asarray(x, bool), np.asarray(y, bool)
    union = int(np.logical_or(x, y).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(x, y).sum()) / union


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def precision_recall_f1(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Zero denominators give 0.

    F1 is taken in its count form 2TP / (2TP + FP + FN), equal to the harmonic
    mean of precision and recall but free of its extra rounding.
    """
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = dice_from_counts(counts)
    return precision, recall, f1


def dice_from_counts(counts: ConfusionCounts) -> float:
    return _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)


def confusion_from_maps(pred: np.ndarray, gt: np.ndarray, classes=range(6),
                        ignore_label: int | None = 6) -> dict[int, ConfusionCounts]:
    """One-vs-rest counts per class over pixels whose ground truth is not ``ignore_label``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if ignore_label is not None:
        keep = gt != ignore_label
        pred, gt = pred[keep], gt[keep]
    else:
        pred, gt = pred.ravel(), gt.ravel()
    n = gt.size
    out = {}
    for c in classes:
        p, g = pred == c, gt == c
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p)) - tp
        fn = int(np.count_nonzero(g)) - tp
        out[c] = ConfusionCounts(tp, fp, fn, n - tp - fp - fn)
    return out
