"""Ranking metrics and seed aggregation."""

from __future__ import annotations

import math

import numpy as np

Z95 = 1.959963984540054


def average_precision(scores, is_positive, num_ground_truth: int) -> float:
    """Area under the step precision-recall curve of a scored detection list.

    Detections are swept in decreasing score order; tied scores enter
    together. Recall is measured against ``num_ground_truth``, so missed
    ground truth caps the curve below 1. Returns 0 when there is no ground
    truth.
    """
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.asarray(is_positive, dtype=bool)
    if num_ground_truth <= 0 or scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, h = scores[order], hits[order]
    tp = np.cumsum(h)
    n = np.arange(1, len(s) + 1)
    last = np.r_[s[1:] != s[:-1], True]
    tp, n = tp[last], n[last]
    precision = tp / n
    recall = tp / num_ground_truth
    gained = np.diff(np.r_[0.0, recall])
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(gained * precision)


def mean_and_half_width(values) -> tuple[float, float]:
    """Sample mean and normal-approximation 95% half-width."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    return float(v.mean()), float(Z95 * v.std(ddof=1) / np.sqrt(v.size))
