import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hallucdet.metrics import average_precision, mean_and_half_width


def brute_force_ap(scores, hits, num_gt):
    """Step-curve AP recomputed independently at every distinct score.

    Every distinct score is tried as a threshold and the detections at or
    above it are recounted from scratch, so tied detections form one step.
    """
    if num_gt == 0 or not len(scores):
        return 0.0
    terms, prev_recall = [], 0.0
    for t in sorted(set(scores), reverse=True):
        chosen = [h for s, h in zip(scores, hits) if s >= t]
        tp = sum(chosen)
        recall = tp / num_gt
        terms.append((recall - prev_recall) * (tp / len(chosen)))
        prev_recall = recall
    return math.fsum(terms)


def test_perfect_ranking():
    assert average_precision([0.9, 0.8, 0.1], [True, True, False], 2) == 1.0


def test_all_wrong():
    assert average_precision([0.9, 0.8], [False, False], 3) == 0.0


def test_no_ground_truth():
    assert average_precision([0.9], [False], 0) == 0.0
    assert average_precision([], [], 4) == 0.0


def test_known_value():
    # hits at ranks 1 and 3 of 4, two ground truths: 0.5*1 + 0.5*(2/3)
    ap = average_precision([0.9, 0.8, 0.7, 0.6], [True, False, True, False], 2)
    assert ap == pytest.approx(0.5 + 1 / 3, abs=1e-15)


def test_missed_ground_truth_caps_recall():
    assert average_precision([0.9], [True], 4) == pytest.approx(0.25)


def test_ties_are_order_independent():
    a = average_precision([0.5, 0.5, 0.5], [True, False, False], 1)
    b = average_precision([0.5, 0.5, 0.5], [False, False, True], 1)
    assert a == b == pytest.approx(1 / 3)


def test_matches_exhaustive_permutations_on_small_pool():
    gen = np.random.default_rng(0)
    scores = np.round(gen.random(7), 1)
    hits = gen.random(7) < 0.5
    n_gt = int(hits.sum()) + 1
    expected = brute_force_ap(list(scores), list(hits), n_gt)
    for perm in itertools.islice(itertools.permutations(range(7)), 500):
        p = list(perm)
        assert average_precision(scores[p], hits[p], n_gt) == expected


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=0, max_size=20),
       st.integers(0, 5))
def test_matches_brute_force_oracle(pairs, extra_gt):
    scores = [s / 6 for s, _ in pairs]
    hits = [h for _, h in pairs]
    n_gt = sum(hits) + extra_gt
    assert average_precision(scores, hits, n_gt) == brute_force_ap(scores, hits, n_gt)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.integers(0, 10_000))
def test_ap_in_unit_interval(scores, seed):
    hits = np.random.default_rng(seed).random(len(scores)) < 0.5
    ap = average_precision(scores, hits, int(hits.sum()) + 1)
    assert 0.0 <= ap <= 1.0


def test_half_width():
    mean, half = mean_and_half_width([1.0, 3.0])
    assert mean == 2.0 and half == pytest.approx(1.959963984540054 * np.sqrt(2) / np.sqrt(2))
    with pytest.raises(ValueError):
        mean_and_half_width([1.0])


def test_half_width_shrinks_like_inverse_sqrt():
    gen = np.random.default_rng(0)
    small = [mean_and_half_width(gen.normal(0, 1, 25))[1] for _ in range(400)]
    large = [mean_and_half_width(gen.normal(0, 1, 100))[1] for _ in range(400)]
    assert np.mean(small) / np.mean(large) == pytest.approx(2.0, rel=0.05)
