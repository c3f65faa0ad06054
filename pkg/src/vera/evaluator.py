"""Frame-level ROC AUC, average precision and dataset aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from ._validation import check_binary_vector, check_consistent_length, check_score_vector
from .manifest import ManifestError, expand_labels, read_scores


class DegenerateLabels(ValueError):
    """The labels do not contain the classes a metric needs."""


def _inputs(scores, labels):
    s = check_score_vector(scores)
    y = check_binary_vector(labels, "labels")
    check_consistent_length(s, y, names=("scores", "labels"))
    return s, y


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Tied scores count half, which equals the trapezoidal area under the
    empirical ROC curve.
    """
    s, y = _inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC AUC needs both positive and negative frames")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum of precision at each rank weighted by the recall gained there.

    Frames are ranked by descending score; ties keep their original order.
    """
    s, y = _inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabels("average precision needs at least one positive frame")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(np.sum(precision[hits == 1]) / n_pos)


def roc_curve(scores, labels) -> list:
    """ROC points ``(fpr, tpr)`` from ``(0, 0)`` to ``(1, 1)``, one per distinct threshold."""
    s, y = _inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC curve needs both positive and negative frames")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last_of_group = np.r_[np.diff(s_sorted) != 0, True]
    points = [(0.0, 0.0)]
    points += [(float(f / n_neg), float(t / n_pos)) for f, t in zip(fp[last_of_group], tp[last_of_group])]
    return points


def accuracy(preds, labels) -> float:
    p = check_binary_vector(preds, "preds")
    y = check_binary_vector(labels, "labels")
    check_consistent_length(p, y, names=("preds", "labels"))
    if y.size == 0:
        raise DegenerateLabels("accuracy of an empty set is undefined")
    return float(np.mean(p == y))


@dataclass
class MetricReport:
    auc: float
    ap: float
    n_frames: int
    n_positive: int
    roc_points: list = field(repr=False)
    per_video: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "auc": self.auc,
            "ap": self.ap,
            "n_frames": self.n_frames,
            "n_positive": self.n_positive,
            "per_video": {k: {"auc": a, "ap": p} for k, (a, p) in self.per_video.items()},
            "roc_points": [list(p) for p in self.roc_points],
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    def summary(self) -> str:
        return (
            f"AUC {self.auc * 100:.4f}  AP {self.ap * 100:.4f}  "
            f"frames {self.n_frames}  positive {self.n_positive}  videos {len(self.per_video)} with both classes"
        )


def evaluate_arrays(score_map: dict, label_map: dict) -> MetricReport:
    """Aggregate per-video score and label vectors (both keyed by video id)."""
    ids = list(label_map)
    all_s = np.concatenate([np.asarray(score_map[i], dtype=np.float64) for i in ids])
    all_y = np.concatenate([np.asarray(label_map[i], dtype=np.int64) for i in ids])
    per_video = {}
    for i in ids:
        y = np.asarray(label_map[i])
        if 0 < y.sum() < y.size:
            per_video[i] = (roc_auc(score_map[i], y), average_precision(score_map[i], y))
    return MetricReport(
        auc=roc_auc(all_s, all_y),
        ap=average_precision(all_s, all_y),
        n_frames=int(all_y.size),
        n_positive=int(all_y.sum()),
        roc_points=roc_curve(all_s, all_y),
        per_video=per_video,
    )


def aggregate(manifest, score_files) -> MetricReport:
    """Global and per-video metrics over every video in ``manifest``.

    ``score_files`` maps video id to a score CSV path, or is a directory holding
    ``<id>.csv`` files.
    """
    if not isinstance(score_files, dict):
        root = Path(score_files)
        score_files = {v.id: root / f"{v.id}.csv" for v in manifest.videos}
    scores, labels = {}, {}
    for v in manifest.videos:
        path = score_files.get(v.id)
        if path is None or not Path(path).exists():
            raise ManifestError(f"missing score file for video {v.id!r}")
        s = read_scores(path)
        if s.size != v.frame_count:
            raise ManifestError(f"score file for video {v.id!r} has {s.size} frames, expected {v.frame_count}")
        scores[v.id] = s
        labels[v.id] = expand_labels(v).labels
    return evaluate_arrays(scores, labels)
