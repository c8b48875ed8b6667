"""Class-weighted binary cross entropy over masked person pairs.

Class weights follow w_c = (2 / n_c) * sum_k n_k, computed as
(2 * sum_k n_k) / n_c so the integer numerator stays exact and hand values
like equal-count weights come out as exact floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor
from .transformer import LogitCube


@dataclass
class ClassWeights:
    """Per-class loss weights derived from training pair counts."""

    w: np.ndarray
    n: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.w)


def compute_class_weights(counts) -> ClassWeights:
    n = np.asarray(counts, dtype=np.int64)
    if n.ndim != 1 or len(n) < 1:
        raise DataError(f"class counts must be a non-empty vector, got shape {n.shape}")
    if (n < 1).any():
        bad = int(np.argmin(n))
        raise DataError(f"class {bad} has zero training pairs; weight undefined")
    total = int(n.sum())
    w = (2.0 * total) / n.astype(np.float64)
    return ClassWeights(w=w, n=n)


def build_mask(relations, p_actual: int, p: int, mode: str):
    """Expand labeled pairs into a pair mask and a target-class grid.

    mode "unilateral" marks only the annotated direction of each pair;
    "bilateral" marks both directions with the label replicated. The
    diagonal is never marked. Returns (mask[p,p] bool, targets[p,p] int
    with -1 at unmarked slots).
    """
    if mode not in ("unilateral", "bilateral"):
        raise ValueError(f"unknown masking mode {mode!r}")
    if p_actual > p:
        raise DataError(f"{p_actual} persons exceed padded grid size {p}")
    mask = np.zeros((p, p), dtype=bool)
    targets = np.full((p, p), -1, dtype=np.int64)
    for i, j, cls in relations:
        if i == j:
            raise DataError(f"self-pair label ({i},{i}) is not allowed")
        if not (0 <= i < p_actual and 0 <= j < p_actual):
            raise DataError(f"pair ({i},{j}) out of range for {p_actual} persons")
        slots = [(i, j)] if mode == "unilateral" else [(i, j), (j, i)]
        for a, b in slots:
            if mask[a, b]:
                raise DataError(f"duplicate label for pair ({a},{b})")
            mask[a, b] = True
            targets[a, b] = cls
    return mask, targets


def weighted_bce_sum(cube: LogitCube, targets: np.ndarray, mask: np.ndarray,
                     weights: ClassWeights, literal_form: bool = False):
    """Loss summed over masked slots, plus the slot count.

    Per masked slot and class: -w_c (y_c log s_c + (1 - y_c) log(1 - s_c))
    with s = sigmoid(score); probabilities are clamped away from 0 and 1 by
    the log op. With literal_form the positive-label term w_c y_c log s_c is
    used verbatim, unnegated and without the complement term.
    """
    m = cube.scores
    slots, c = m.shape
    if mask.shape != (cube.p, cube.p) or targets.shape != (cube.p, cube.p):
        raise ShapeError(f"mask/target grids must be {cube.p}x{cube.p}")
    if c != weights.num_classes:
        raise ShapeError(f"scores have {c} classes but weights have {weights.num_classes}")
    flat_mask = mask.ravel()
    if flat_mask.sum() == 0:
        raise DataError("no masked pairs contribute to the loss")
    if (flat_mask & ~cube.valid).any():
        raise DataError("mask marks an invalid pair slot (diagonal or padding)")

    dtype = m.data.dtype
    y = np.zeros((slots, c), dtype=dtype)
    rows = np.flatnonzero(flat_mask)
    y[rows, targets.ravel()[rows]] = 1
    coef = np.where(flat_mask[:, None], weights.w[None, :], 0.0).astype(dtype)

    probs = m.sigmoid()
    y_t = Tensor(y)
    if literal_form:
        per_entry = y_t * probs.log() * Tensor(coef)
    else:
        comp = Tensor(np.ones_like(y) - y) * (1.0 - probs).log()
        per_entry = -((y_t * probs.log() + comp) * Tensor(coef))
    return per_entry.sum(), int(flat_mask.sum())


def weighted_bce(cube: LogitCube, targets: np.ndarray, mask: np.ndarray,
                 weights: ClassWeights, literal_form: bool = False) -> Tensor:
    """Masked-slot mean of the class-weighted BCE."""
    total, count = weighted_bce_sum(cube, targets, mask, weights, literal_form)
    return total * (1.0 / count)
