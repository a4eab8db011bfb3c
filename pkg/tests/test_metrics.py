"""Ranking metrics and codebook usage statistics."""

import math

import numpy as np
import pytest

from mec.metrics import auc, code_distribution, logloss, tied_ranks, weighted_code_entropy
from mec.quantizer import Codebook


def brute_force_auc(labels, scores):
    """O(P*N) pairwise comparison with half credit for ties."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def test_tied_ranks():
    got = tied_ranks(np.array([10.0, 20.0, 20.0, 30.0]))
    assert np.array_equal(got, [1.0, 2.5, 2.5, 4.0])
    got = tied_ranks(np.array([5.0, 5.0, 5.0]))
    assert np.array_equal(got, [2.0, 2.0, 2.0])


def test_auc_known_values():
    assert auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert auc([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9]) == 0.0
    assert auc([0, 1], [0.5, 0.5]) == 0.5


def test_auc_matches_brute_force():
    rng = np.random.default_rng(21)
    for trial in range(40):
        n = int(rng.integers(2, 300))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        if trial % 3 == 0:
            scores = rng.integers(0, 4, size=n).astype(float)  # tie-heavy
        else:
            scores = rng.normal(size=n)
        assert auc(labels, scores) == pytest.approx(brute_force_auc(labels, scores), abs=1e-12)


def test_auc_rejects_single_class():
    with pytest.raises(ValueError):
        auc([1, 1, 1], [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        auc([0, 0], [0.1, 0.2])


def test_logloss_matches_formula_and_clamps():
    labels = np.array([1.0, 0.0, 1.0])
    probs = np.array([0.8, 0.3, 0.6])
    want = -np.mean(labels * np.log(probs) + (1 - labels) * np.log(1 - probs))
    assert logloss(labels, probs) == pytest.approx(want, rel=1e-12)
    # exact 0/1 probabilities stay finite through the clamp
    val = logloss([1.0, 0.0], [0.0, 1.0])
    assert math.isfinite(val)
    assert val == pytest.approx(-math.log(1e-7), rel=1e-9)


def _toy_codebook(codes, weights, k=4, field_offsets=None, names=None):
    codes = np.asarray(codes)
    g, m = codes.shape
    rng = np.random.default_rng(0)
    return Codebook(
        field_names=names or ["f0"],
        field_offsets=field_offsets or [0, g],
        codewords=rng.normal(size=(m, k, 2)).astype(np.float32),
        codes=codes,
        weights=weights,
    )


def test_code_distribution_orders_by_count_then_id():
    cb = _toy_codebook(np.array([[0], [2], [2], [1], [3], [1]]), np.ones(6, dtype=np.uint8))
    ids, counts = code_distribution(cb, subspace=0)
    assert list(ids) == [1, 2, 0, 3]
    assert list(counts) == [2, 2, 1, 1]
    ids, counts = code_distribution(cb, subspace=0, top_n=2)
    assert list(ids) == [1, 2]


def test_code_distribution_field_filter():
    codes = np.array([[0], [0], [3], [3]])
    cb = _toy_codebook(codes, np.ones(4, dtype=np.uint8), field_offsets=[0, 2, 4], names=["a", "b"])
    ids, counts = code_distribution(cb, field="b")
    # unused codes trail with zero counts, id ascending
    assert list(ids) == [3, 0, 1, 2]
    assert list(counts) == [2, 0, 0, 0]
    with pytest.raises(ValueError):
        code_distribution(cb, field="nope")
    with pytest.raises(ValueError):
        code_distribution(cb, subspace=5)


def test_weighted_code_entropy_bounds():
    # all rows on one code: zero entropy
    cb = _toy_codebook(np.zeros((8, 2), dtype=np.int64), np.ones(8, dtype=np.uint8))
    assert weighted_code_entropy(cb) == pytest.approx(0.0, abs=1e-12)
    # uniform usage over K codes: ln K per subspace
    codes = np.tile(np.arange(4), 2)[:, None].repeat(2, axis=1)
    cb = _toy_codebook(codes, np.ones(8, dtype=np.uint8))
    assert weighted_code_entropy(cb) == pytest.approx(math.log(4), rel=1e-12)


def test_weighted_code_entropy_uses_weights():
    codes = np.array([[0], [1]])
    even = _toy_codebook(codes, np.array([1, 1], dtype=np.uint8))
    skewed = _toy_codebook(codes, np.array([7, 1], dtype=np.uint8))
    assert weighted_code_entropy(skewed) < weighted_code_entropy(even)
    with pytest.raises(ValueError):
        weighted_code_entropy(_toy_codebook(codes, np.zeros(2, dtype=np.uint8)))
