"""Continual-learning accuracy metrics and shortcut-feature diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

SHORTCUT, NON_SHORTCUT, INACTIVE = "shortcut", "non_shortcut", "inactive"


class AccuracyMatrix:
    """Lower-triangular matrix; ``a[i][j]`` is accuracy on task j after task i (0-based here)."""

    def __init__(self, num_tasks):
        self.num_tasks = num_tasks
        self.a = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows):
        m = cls(len(rows))
        for i, row in enumerate(rows):
            if len(row) != i + 1:
                raise ValueError(f"row {i} must have {i + 1} entries, got {len(row)}")
            m.a[i, :i + 1] = row
        return m

    def set(self, i, j, value):
        if j > i:
            raise ValueError(f"entry ({i}, {j}) lies above the diagonal")
        if not 0 <= value <= 1:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.a[i, j] = value

    def rows(self):
        return [[float(x) for x in self.a[i, :i + 1]] for i in range(self.num_tasks)]

    def complete(self):
        return all(not np.isnan(self.a[i, :i + 1]).any() for i in range(self.num_tasks))


def _matrix(m):
    return m if isinstance(m, AccuracyMatrix) else AccuracyMatrix.from_rows(m)


def avg_accuracy(m):
    """Mean over tasks i of the mean accuracy on tasks 1..i at the end of task i."""
    m = _matrix(m)
    if m.num_tasks == 0:
        raise ValueError("avg_accuracy needs at least one task")
    if not m.complete():
        raise ValueError("accuracy matrix is incomplete")
    return float(np.mean([m.a[i, :i + 1].mean() for i in range(m.num_tasks)]))


def forgetting(m):
    """Mean over earlier tasks of (best earlier accuracy - final accuracy)."""
    m = _matrix(m)
    t = m.num_tasks
    if t < 2:
        raise ValueError("forgetting needs at least two tasks")
    if not m.complete():
        raise ValueError("accuracy matrix is incomplete")
    last = t - 1
    drops = [m.a[j:last, j].max() - m.a[last, j] for j in range(last)]
    return float(np.mean(drops))


def mean_stderr(values):
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


# ---------------------------------------------------------------- diagnostics

@dataclass(frozen=True)
class DiagnosticThresholds:
    rho: float
    epsilon: float

    def __post_init__(self):
        if self.epsilon < 0 or self.rho < self.epsilon:
            raise ValueError(f"need rho >= epsilon >= 0, got rho={self.rho}, epsilon={self.epsilon}")


def _features(model, images):
    from .backbone import forward

    if model is None:
        return np.asarray(images, dtype=float)
    return forward(model, images, track_grad=False).features.data.astype(float)


def default_thresholds(seen_means):
    """75th / 25th percentiles of the seen-batch mean activations."""
    return DiagnosticThresholds(float(np.percentile(seen_means, 75)), float(np.percentile(seen_means, 25)))


def classify_activations(seen_means, unseen_means, th: DiagnosticThresholds):
    """Label each feature from its mean |activation| on seen and unseen data."""
    labels = []
    for s, u in zip(seen_means, unseen_means):
        if s >= th.rho:
            labels.append(SHORTCUT if u >= th.epsilon else NON_SHORTCUT)
        else:
            labels.append(INACTIVE)
    return labels


def classify_features(model, seen, unseen, th=None):
    """Diagnose every feature of ``model`` as shortcut, non-shortcut or inactive.

    ``seen`` and ``unseen`` are image batches. Passing ``model=None`` treats them
    as precomputed (N, d) feature matrices.
    """
    seen_means = np.abs(_features(model, seen)).mean(axis=0)
    unseen_means = np.abs(_features(model, unseen)).mean(axis=0)
    if th is None:
        th = default_thresholds(seen_means)
    return classify_activations(seen_means, unseen_means, th), th


def activation_gap(model, seen, labels):
    """Mean |activation| on ``seen`` over shortcut and over non-shortcut features.

    A category with no features yields ``None`` for its mean.
    """
    means = np.abs(_features(model, seen)).mean(axis=0)
    labels = np.asarray(labels)
    out = []
    for kind in (SHORTCUT, NON_SHORTCUT):
        sel = labels == kind
        out.append(float(means[sel].mean()) if sel.any() else None)
    return tuple(out)


def attention_histogram(attention, regions, bins=20, path=None):
    """Histogram of attention values split by ground-truth shortcut region.

    ``attention`` is (N, h, w); ``regions`` is a boolean (N, H, W) mask at image
    resolution, reduced to the attention grid by nearest sampling. Returns rows
    of (bin_lo, bin_hi, count_shortcut, count_other).
    """
    att = np.asarray(attention, dtype=float)
    reg = np.asarray(regions, dtype=bool)
    h, w = att.shape[-2:]
    H, W = reg.shape[-2:]
    ri = (np.arange(h) * H) // h
    rj = (np.arange(w) * W) // w
    reg = reg[:, ri[:, None], rj[None, :]]
    lo, hi = float(att.min()), float(att.max())
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    in_sc, _ = np.histogram(att[reg], edges)
    out_sc, _ = np.histogram(att[~reg], edges)
    rows = [(float(edges[k]), float(edges[k + 1]), int(in_sc[k]), int(out_sc[k])) for k in range(bins)]
    if path is not None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["bin_lo", "bin_hi", "shortcut_region", "other"])
            wr.writerows(rows)
    return rows
