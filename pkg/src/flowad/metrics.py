"""Image- and pixel-level evaluation metrics.

AUROC uses the Mann-Whitney statistic (ties get half credit), AP uses the
step-wise precision sweep over distinct descending thresholds, F1-max sweeps
the same thresholds, and PRO integrates mean per-region overlap against
global false-positive rate up to `fpr_limit` (trapezoid rule, normalized by
the limit). PRO thresholds sweep the distinct map values with strict ">"
binarization, so a constant map scores 0 and an exact match scores 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .kernels import label_components

DEFAULT_FPR_LIMIT = 0.3


class UndefinedMetricError(DataError):
    def __init__(self, message):
        super().__init__(message, code="undefined_metric")


def _binary_labels(labels):
    labels = np.asarray(labels).astype(np.int64).ravel()
    if not ((labels == 0) | (labels == 1)).all():
        raise UndefinedMetricError("labels must be binary (0/1)")
    return labels


def _require_both_classes(labels, what):
    if labels.min() == labels.max():
        raise UndefinedMetricError(f"{what} undefined: labels contain a single class")


def auroc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary_labels(labels)
    _require_both_classes(labels, "AUROC")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # average rank within each tie group (1-based ranks)
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _threshold_sweep(scores, labels):
    """Cumulative (tp, fp) after each distinct descending threshold (>= semantics)."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    last = np.flatnonzero(np.concatenate((np.diff(s) != 0, [True])))
    tp = np.cumsum(y)[last].astype(np.float64)
    fp = np.cumsum(1 - y)[last].astype(np.float64)
    return tp, fp


def average_precision(scores, labels):
    """Step-wise AP: sum of precision times recall increments over the sweep."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary_labels(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP undefined: no positive labels")
    tp, fp = _threshold_sweep(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.concatenate(([0.0], recall))) * precision))


def f1_max(scores, labels):
    """Max F1 over thresholds taken at each distinct score."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary_labels(labels)
    _require_both_classes(labels, "F1-max")
    n_pos = int(labels.sum())
    tp, fp = _threshold_sweep(scores, labels)
    fn = n_pos - tp
    return float(np.max(2.0 * tp / (2.0 * tp + fp + fn)))


def pro(maps, masks, fpr_limit=DEFAULT_FPR_LIMIT):
    """Per-region overlap integrated over global FPR up to `fpr_limit`.

    `maps` and `masks` are matching sequences of (h, w) arrays. Overlap is
    averaged over the 8-connected components of all ground-truth masks.
    """
    if fpr_limit <= 0:
        raise UndefinedMetricError("PRO undefined: fpr_limit must be positive")
    scores = []
    comp_weight = []  # per pixel: 1/(component size * n_components), else 0
    is_neg = []
    comp_sizes = []
    pending = []  # (map values, labels) per image, component ids offset later
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask) != 0
        if amap.shape != mask.shape:
            raise DataError("map and mask shapes differ", code="shape_mismatch")
        labels_img, count = label_components(mask)
        sizes = np.bincount(labels_img.ravel(), minlength=count + 1)[1:]
        pending.append((amap.ravel(), labels_img.ravel(), len(comp_sizes)))
        comp_sizes.extend(sizes.tolist())
        is_neg.append(~mask.ravel())
    n_comp = len(comp_sizes)
    if n_comp == 0:
        raise UndefinedMetricError("PRO undefined: no anomalous region in any mask")
    comp_sizes = np.asarray(comp_sizes, dtype=np.float64)
    for values, labels_img, offset in pending:
        scores.append(values)
        w = np.zeros(values.size, dtype=np.float64)
        fg = labels_img > 0
        w[fg] = 1.0 / (comp_sizes[labels_img[fg] - 1 + offset] * n_comp)
        comp_weight.append(w)
    scores = np.concatenate(scores)
    comp_weight = np.concatenate(comp_weight)
    is_neg = np.concatenate(is_neg).astype(np.float64)
    n_neg = is_neg.sum()

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    cum_overlap = np.cumsum(comp_weight[order])
    cum_neg = np.cumsum(is_neg[order])
    # one node per distinct value v: pixels with score > v, i.e. the prefix
    # before v's first occurrence in descending order
    first = np.concatenate(([0], np.flatnonzero(np.diff(s) != 0) + 1))
    prev = first - 1
    overlaps = np.where(prev >= 0, cum_overlap[np.maximum(prev, 0)], 0.0)
    fprs = np.where(prev >= 0, cum_neg[np.maximum(prev, 0)], 0.0)
    fprs = fprs / n_neg if n_neg > 0 else np.zeros_like(fprs)

    xs = np.concatenate(([0.0], fprs))
    ys = np.concatenate(([0.0], overlaps))
    if xs[-1] < fpr_limit:
        xs = np.append(xs, fpr_limit)
        ys = np.append(ys, ys[-1])
    elif xs[-1] > fpr_limit:
        idx = int(np.searchsorted(xs, fpr_limit, side="right"))
        x0, x1 = xs[idx - 1], xs[idx]
        y_cut = ys[idx - 1] if x1 == x0 else ys[idx - 1] + (ys[idx] - ys[idx - 1]) * (
            (fpr_limit - x0) / (x1 - x0)
        )
        xs = np.append(xs[:idx], fpr_limit)
        ys = np.append(ys[:idx], y_cut)
    area = float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))
    return area / fpr_limit


# -- report assembly ----------------------------------------------------------


@dataclass
class CategoryMetrics:
    image_auroc: float
    image_f1max: float
    image_ap: float
    pixel_auroc: float
    pixel_pro: float
    pixel_ap: float

    def row(self):
        return [self.image_auroc, self.image_f1max, self.image_ap,
                self.pixel_auroc, self.pixel_pro, self.pixel_ap]


@dataclass
class MetricsReport:
    per_category: dict
    mean: CategoryMetrics
    fpr_limit: float = DEFAULT_FPR_LIMIT

    COLUMNS = ("image_auroc", "image_f1max", "image_ap",
               "pixel_auroc", "pixel_pro", "pixel_ap")

    def to_text(self):
        width = max([len("category"), len("mean")] + [len(c) for c in self.per_category])
        header = "category".ljust(width) + "".join(f"  {c:>12}" for c in self.COLUMNS)
        lines = [header, "-" * len(header)]
        for name, row in self.per_category.items():
            lines.append(name.ljust(width) + "".join(f"  {v:12.4f}" for v in row.row()))
        lines.append("-" * len(header))
        lines.append("mean".ljust(width) + "".join(f"  {v:12.4f}" for v in self.mean.row()))
        lines.append(f"(PRO integration limit: FPR <= {self.fpr_limit})")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        lines = ["category," + ",".join(self.COLUMNS)]
        for name, row in self.per_category.items():
            lines.append(name + "," + ",".join(f"{v:.6f}" for v in row.row()))
        lines.append("mean," + ",".join(f"{v:.6f}" for v in self.mean.row()))
        return "\n".join(lines) + "\n"


def compute_report(samples, fpr_limit=DEFAULT_FPR_LIMIT):
    """Aggregate per-image results into per-category and mean metrics.

    `samples` is a list of dicts with keys: category, label, score,
    map (h, w float), mask (h, w binary).
    """
    categories = {}
    for s in samples:
        categories.setdefault(s["category"], []).append(s)
    per_category = {}
    for name in sorted(categories):
        items = categories[name]
        labels = [s["label"] for s in items]
        scores = [s["score"] for s in items]
        maps = [s["map"] for s in items]
        masks = [s["mask"] for s in items]
        flat_maps = np.concatenate([m.ravel() for m in maps])
        flat_masks = np.concatenate([np.asarray(m).ravel() for m in masks])
        per_category[name] = CategoryMetrics(
            image_auroc=auroc(scores, labels),
            image_f1max=f1_max(scores, labels),
            image_ap=average_precision(scores, labels),
            pixel_auroc=auroc(flat_maps, flat_masks),
            pixel_pro=pro(maps, masks, fpr_limit),
            pixel_ap=average_precision(flat_maps, flat_masks),
        )
    rows = np.array([m.row() for m in per_category.values()])
    mean = CategoryMetrics(*rows.mean(axis=0))
    return MetricsReport(per_category=per_category, mean=mean, fpr_limit=fpr_limit)
