"""Overlap, correlation and volume measures.

Undefined quantities (empty denominators, zero variance) are returned as
``None`` rather than a number.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .volume import LabelMap, LesionMask

__all__ = ["dice", "precision_recall", "pearson", "volumes", "OverlapReport", "overlap_report"]


def _masks(x, y):
    if isinstance(x, LesionMask) or isinstance(y, LesionMask):
        if not (isinstance(x, LesionMask) and isinstance(y, LesionMask)):
            raise TypeError("compare two LesionMasks or two arrays")
        if not x.grid.same_as(y.grid):
            raise ValueError("masks live on different grids")
        return x.mask.astype(bool), y.mask.astype(bool)
    x = np.asarray(x).astype(bool)
    y = np.asarray(y).astype(bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    return x, y


def _counts(pred, truth):
    p, t = _masks(pred, truth)
    tp = int(np.count_nonzero(p & t))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(t)) - tp


def dice(x, y) -> float:
    """2|X∩Y| / (|X|+|Y|); two empty masks score 1.0."""
    tp, fp, fn = _counts(x, y)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def precision_recall(pred, truth) -> tuple[float | None, float | None]:
    tp, fp, fn = _counts(pred, truth)
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two sequences of equal length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        return None
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def volumes(labels: LabelMap) -> dict[int, float]:
    """Per-label volume in mm^3 for labels 1..K."""
    counts = np.bincount(labels.labels, minlength=labels.n_labels + 1)
    vv = labels.grid.voxel_volume
    return {k: float(counts[k] * vv) for k in range(1, labels.n_labels + 1)}


@dataclass
class OverlapReport:
    dice: float
    precision: float | None
    recall: float | None
    tp: int
    fp: int
    fn: int
    volumes_mm3: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volumes_mm3"] = {str(k): v for k, v in self.volumes_mm3.items()}
        return d


def overlap_report(pred: LesionMask, truth: LesionMask, labels: LabelMap | None = None) -> OverlapReport:
    tp, fp, fn = _counts(pred, truth)
    p, r = precision_recall(pred, truth)
    vols = volumes(labels) if labels is not None else {}
    return OverlapReport(dice(pred, truth), p, r, tp, fp, fn, vols)
