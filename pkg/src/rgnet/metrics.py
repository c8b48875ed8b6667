"""Per-class recall and mean average precision over evaluated pairs.

Precision is computed at score thresholds, so tied scores are ranked as a
group. This makes the metric invariant both to monotone score transforms
and to duplicating every record (which is exactly what bilateral evaluation
of symmetrized scores does).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class EvalRecord:
    """Scores for one evaluated ordered pair with its ground-truth class."""

    scores: np.ndarray
    true_class: int
    image_id: str
    pair: tuple


def _score_matrix(records, num_classes: int):
    if not records:
        raise DataError("no evaluation records")
    s = np.stack([np.asarray(r.scores, dtype=np.float64) for r in records])
    if s.shape[1] != num_classes:
        raise DataError(f"records carry {s.shape[1]} scores but {num_classes} classes expected")
    if not np.isfinite(s).all():
        raise DataError("non-finite score in evaluation records")
    truth = np.array([r.true_class for r in records], dtype=np.int64)
    if (truth < 0).any() or (truth >= num_classes).any():
        raise DataError("true class out of range")
    return s, truth


def per_class_recall(records, num_classes: int) -> np.ndarray:
    """Recall percentage per class; NaN where a class has no pairs.

    Prediction is the argmax score, ties broken toward the lowest class
    index.
    """
    s, truth = _score_matrix(records, num_classes)
    pred = np.argmax(s, axis=1)
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        total = int((truth == c).sum())
        if total:
            out[c] = 100.0 * int(((truth == c) & (pred == c)).sum()) / total
    return out


def average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """AP for one class: mean over positives of precision at their score
    threshold (no interpolation)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    npos = int(positive.sum())
    if npos == 0:
        raise DataError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    pos_sorted = positive[order]
    cum_pos = np.cumsum(pos_sorted)
    n = len(scores)
    run_end = np.empty(n, dtype=np.int64)
    last = n - 1
    for idx in range(n - 1, -1, -1):
        if idx < n - 1 and s_sorted[idx] != s_sorted[idx + 1]:
            last = idx
        run_end[idx] = last
    prec = cum_pos[run_end] / (run_end + 1.0)
    return float(prec[pos_sorted].mean())


def mean_average_precision(records, num_classes: int) -> float:
    """mAP percentage over classes that have at least one positive pair."""
    s, truth = _score_matrix(records, num_classes)
    aps = []
    for c in range(num_classes):
        positive = truth == c
        if not positive.any():
            warnings.warn(f"class {c} has no positives; excluded from mAP", stacklevel=2)
            continue
        aps.append(average_precision(s[:, c], positive))
    if not aps:
        raise DataError("no class has positive pairs; mAP undefined")
    return 100.0 * float(np.mean(aps))
