import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvremap.attention import (
    AttentionOutput,
    dense_attend,
    output_error,
    recall_rate,
    sparse_attend,
    stable_softmax,
)
from kvremap.core import EmptySelectionError, SelectionMask
from kvremap.retrieval import select_token_oracle, select_window

from .helpers import make_cache


def naive_attention(q, keys, values):
    logits = [float(np.dot(q, k)) / math.sqrt(len(q)) for k in keys]
    e = [math.exp(x) for x in logits]
    s = sum(e)
    w = [x / s for x in e]
    return np.sum([wi * np.asarray(v, dtype=np.float64) for wi, v in zip(w, values)], axis=0), w


def test_single_token_mask(rng):
    keys, values = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    cache = make_cache(keys, values)
    out = sparse_attend(rng.standard_normal(4), cache, SelectionMask.of([3]))
    assert np.allclose(out.out, cache.values[3])
    assert out.weight_map() == {3: 1.0}


def test_three_token_hand_example():
    keys = [[1, 0], [0, 1], [-1, 0]]
    values = [[1, 0], [0, 2], [-3, 0]]
    out = sparse_attend([1, 0], make_cache(keys, values), SelectionMask.of([0, 1, 2]))
    # softmax([1/sqrt2, 0, -1/sqrt2]) evaluated by hand with math.exp
    e = [math.exp(1 / math.sqrt(2)), 1.0, math.exp(-1 / math.sqrt(2))]
    expected = [x / sum(e) for x in e]
    assert np.allclose(out.weights, expected, atol=1e-3)
    assert np.allclose(out.weights, [0.5760, 0.2840, 0.1400], atol=1e-3)
    assert np.allclose(out.out, [expected[0] - 3 * expected[2], 2 * expected[1]], atol=1e-6)


def test_full_mask_equals_naive_dense(rng):
    keys, values = rng.standard_normal((50, 8)), rng.standard_normal((50, 8))
    cache = make_cache(keys, values)
    q = rng.standard_normal(8)
    out = dense_attend(q, cache)
    ref, w = naive_attention(q, cache.keys.astype(np.float64), cache.values)
    assert np.max(np.abs(out.out - ref)) < 1e-5
    assert np.allclose(out.weights, w, atol=1e-9)


def test_precomputed_scores_path_matches(rng):
    keys, values = rng.standard_normal((64, 8)), rng.standard_normal((64, 8))
    cache = make_cache(keys, values)
    q = rng.standard_normal(8)
    scores = cache.keys64 @ q
    for idx in ([1, 5, 9], list(range(0, 64, 2))):
        m = SelectionMask.of(idx)
        a = sparse_attend(q, cache, m)
        b = sparse_attend(q, cache, m, scores)
        assert np.allclose(a.out, b.out, atol=1e-12)


def test_empty_mask_rejected():
    with pytest.raises(EmptySelectionError):
        sparse_attend([1, 0], make_cache([[1, 0]]), SelectionMask.of([]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_weights_normalised(n, seed):
    rng = np.random.default_rng(seed)
    cache = make_cache(rng.standard_normal((n, 4)) * 20, rng.standard_normal((n, 4)))
    sel = rng.choice(n, size=rng.integers(1, n + 1), replace=False)
    out = sparse_attend(rng.standard_normal(4) * 20, cache, SelectionMask.of(sel))
    assert abs(out.weights.sum() - 1.0) < 1e-5
    assert np.all(np.isfinite(out.out))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(logits, c):
    a = stable_softmax(np.array(logits))
    b = stable_softmax(np.array(logits) + c)
    assert np.max(np.abs(a - b)) < 1e-6


def test_recall_examples(rng):
    keys = rng.standard_normal((256, 8)).astype(np.float32)
    cache = make_cache(keys)
    q = rng.standard_normal(8)
    assert recall_rate(select_token_oracle(q, cache, 32), q, cache, 32) == 1.0
    scores = keys.astype(np.float64) @ q
    order = sorted(range(256), key=lambda i: (-scores[i], i))
    top = set(order[:32])
    disjoint = SelectionMask.of(sorted(order[32:64]))
    assert recall_rate(disjoint, q, cache, 32) == 0.0
    win = select_window(cache, 32)
    assert recall_rate(win, q, cache, 32) == len(top & set(win)) / 32


def test_recall_needs_enough_tokens():
    cache = make_cache(np.ones((3, 2)))
    with pytest.raises(ValueError):
        recall_rate(SelectionMask.of([0]), [1, 1], cache, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 10_000))
def test_recall_in_unit_interval(n, seed):
    rng = np.random.default_rng(seed)
    cache = make_cache(rng.standard_normal((n, 3)))
    b = int(rng.integers(1, n + 1))
    m = SelectionMask.of(rng.choice(n, size=rng.integers(0, n + 1), replace=False))
    assert 0.0 <= recall_rate(m, rng.standard_normal(3), cache, b) <= 1.0


def test_output_error():
    x = AttentionOutput(np.array([1.0, 0.0]), np.array([0]), np.array([1.0]))
    y = AttentionOutput(np.array([0.0, 1.0]), np.array([0]), np.array([1.0]))
    assert output_error(x, x) == 0.0
    assert output_error(x, y) == pytest.approx(math.sqrt(2), abs=1e-6)


def test_output_error_full_mask_is_zero(rng):
    cache = make_cache(rng.standard_normal((20, 4)), rng.standard_normal((20, 4)))
    q = rng.standard_normal(4)
    full = SelectionMask(np.arange(20))
    assert output_error(sparse_attend(q, cache, full), dense_attend(q, cache)) < 1e-5
