from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predictions == labels))


def confusion_2x2(predictions, labels) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) with class 1 as positive."""
    p = np.asarray(predictions) == 1
    y = np.asarray(labels) == 1
    return int(np.sum(p & y)), int(np.sum(~p & ~y)), int(np.sum(p & ~y)), int(np.sum(~p & y))


def matthews_corr(tp: int, tn: int, fp: int, fn: int) -> float:
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


class Spearman(NamedTuple):
    value: float
    degenerate: bool


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_corr(xs, ys) -> Spearman:
    """Pearson correlation of average ranks; 0 and flagged when a side is constant."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.size < 2:
        raise ValueError("spearman_corr needs two equal-length sequences of length >= 2")
    rx, ry = average_ranks(xs), average_ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return Spearman(0.0, True)
    return Spearman(float(dx @ dy) / denom, False)
