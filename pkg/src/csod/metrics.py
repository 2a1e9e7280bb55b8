"""Saliency evaluation: PR curve, max F-measure, MAE, IoU and S-measure.

PR statistics use 255 thresholds k/256 (k = 1..255) with ``pred >= t``
counted as foreground.  By default precision and recall are averaged over
images at each threshold before F is formed (macro averaging).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

N_THRESHOLDS = 255
BETA2 = 0.3
S_GAMMA = 0.5
_EPS = np.finfo(np.float64).eps


@dataclass
class SaliencyPair:
    pred: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.pred.shape != self.gt.shape or self.pred.ndim != 2:
            raise ValueError(f"pred {self.pred.shape} and gt {self.gt.shape} must be equal 2-D shapes")
        if not np.all((self.gt == 0.0) | (self.gt == 1.0)):
            raise ValueError("ground truth must be binary")
        if np.any(self.pred < 0.0) or np.any(self.pred > 1.0):
            raise ValueError("predictions must lie in [0, 1]")


@dataclass
class MetricsReport:
    max_f: float
    mae: float
    iou: float
    s_measure: float
    pr_curve: list = field(default_factory=list)  # (threshold, precision, recall)


def thresholds():
    return np.arange(1, N_THRESHOLDS + 1) / 256.0


def _require(pairs):
    if not pairs:
        raise ValueError("metrics need at least one prediction/ground-truth pair")


def _counts(pair):
    """TP and predicted-positive counts at every threshold, shape (255,)."""
    # pred >= k/256  <=>  floor(256 * pred) >= k, exact in binary floating point
    bins = np.clip(np.floor(pair.pred * 256.0).astype(np.int64), 0, N_THRESHOLDS)
    fg = pair.gt > 0.5
    hist_all = np.bincount(bins.ravel(), minlength=N_THRESHOLDS + 1)
    hist_fg = np.bincount(bins[fg], minlength=N_THRESHOLDS + 1)
    # count of pixels with bin >= k, for k = 1..255
    pos = np.cumsum(hist_all[::-1])[::-1][1:]
    tp = np.cumsum(hist_fg[::-1])[::-1][1:]
    return tp, pos, int(fg.sum())


def _pr(tp, pos, n_fg, empty_precision):
    precision = np.where(pos > 0, tp / np.maximum(pos, 1), empty_precision)
    recall = tp / n_fg if n_fg > 0 else np.ones_like(tp, dtype=np.float64)
    return precision, recall


def precision_recall(pairs, empty_precision=1.0, micro=False):
    """Mean precision and recall per threshold, arrays of shape (255,)."""
    _require(pairs)
    counts = [_counts(p) for p in pairs]
    if micro:
        tp = sum(c[0] for c in counts)
        pos = sum(c[1] for c in counts)
        n_fg = sum(c[2] for c in counts)
        return _pr(tp, pos, n_fg, empty_precision)
    ps, rs = zip(*(_pr(*c, empty_precision) for c in counts))
    return np.mean(ps, axis=0), np.mean(rs, axis=0)


def pr_curve(pairs, **kwargs):
    p, r = precision_recall(pairs, **kwargs)
    return [(float(t), float(pi), float(ri)) for t, pi, ri in zip(thresholds(), p, r)]


def f_measure(precision, recall, beta2=BETA2):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    den = beta2 * precision + recall
    return np.where(den > 0, (1 + beta2) * precision * recall / np.where(den > 0, den, 1.0), 0.0)


def max_f_measure(pairs, beta2=BETA2, **kwargs):
    p, r = precision_recall(pairs, **kwargs)
    return float(f_measure(p, r, beta2).max())


def mae(pairs):
    _require(pairs)
    return float(np.mean([np.mean(np.abs(p.pred - p.gt)) for p in pairs]))


def iou(pairs, threshold=0.5):
    _require(pairs)
    scores = []
    for p in pairs:
        s = p.pred >= threshold
        g = p.gt > 0.5
        union = np.count_nonzero(s | g)
        scores.append(1.0 if union == 0 else np.count_nonzero(s & g) / union)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# S-measure (object-aware + region-aware structural similarity)
# ---------------------------------------------------------------------------

def _object_score(values):
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def s_object(pred, gt):
    fg = gt > 0.5
    u = fg.mean()
    o_fg = _object_score(pred[fg])
    o_bg = _object_score(1.0 - pred[~fg])
    return u * o_fg + (1.0 - u) * o_bg


def centroid(gt):
    """Foreground centroid as 1-based, rounded (column, row) split indices."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return _round_half_up(w / 2), _round_half_up(h / 2)
    cols = np.arange(1, w + 1)
    rows = np.arange(1, h + 1)
    x = _round_half_up((gt.sum(axis=0) * cols).sum() / total)
    y = _round_half_up((gt.sum(axis=1) * rows).sum() / total)
    return x, y


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def _ssim(pred, gt):
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    if beta == 0:
        return 1.0
    return 0.0


def s_region(pred, gt):
    h, w = gt.shape
    x, y = centroid(gt)
    area = h * w
    w1 = x * y / area
    w2 = (w - x) * y / area
    w3 = x * (h - y) / area
    w4 = 1.0 - w1 - w2 - w3
    quads = [
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    ]
    return sum(wt * _ssim(pred[q], gt[q]) for wt, q in zip((w1, w2, w3, w4), quads) if wt > 0)


def s_measure_pair(pred, gt, gamma=S_GAMMA):
    y = gt.mean()
    if y == 0:
        score = 1.0 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        score = gamma * s_object(pred, gt) + (1.0 - gamma) * s_region(pred, gt)
    return float(min(max(score, 0.0), 1.0))


def s_measure(pairs, gamma=S_GAMMA):
    _require(pairs)
    return float(np.mean([s_measure_pair(p.pred, p.gt, gamma) for p in pairs]))


def evaluate(pairs, iou_threshold=0.5, **pr_kwargs) -> MetricsReport:
    p, r = precision_recall(pairs, **pr_kwargs)
    curve = [(float(t), float(pi), float(ri)) for t, pi, ri in zip(thresholds(), p, r)]
    return MetricsReport(
        max_f=float(f_measure(p, r).max()),
        mae=mae(pairs),
        iou=iou(pairs, iou_threshold),
        s_measure=s_measure(pairs),
        pr_curve=curve,
    )


def write_metrics_csv(path, reports):
    """``reports`` maps a dataset name to its MetricsReport."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "maxf", "mae", "iou", "smeasure"])
        for name, rep in reports.items():
            w.writerow([name, repr(rep.max_f), repr(rep.mae), repr(rep.iou), repr(rep.s_measure)])


def write_pr_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in curve:
            w.writerow([repr(t), repr(p), repr(r)])
