import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cachefed.errors import DegenerateInputError, LabelError, ShapeError
from cachefed.numerics import (
    cross_entropy,
    l2_normalize_rows,
    matmul,
    one_hot,
    softmax_rows,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 5))
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[1.0], [1.0]])
        assert np.array_equal(matmul(a, b), np.array([[3.0], [7.0]]))

    def test_against_triple_loop_oracle(self, rng):
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            matmul(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))

    def test_associativity(self, rng):
        for _ in range(20):
            a = rng.standard_normal((4, 6))
            b = rng.standard_normal((6, 5))
            c = rng.standard_normal((5, 3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            err = np.linalg.norm(left - right) / np.linalg.norm(left)
            assert err < 1e-9


class TestSoftmaxRows:
    def test_symmetric_row(self):
        out = softmax_rows(np.array([[0.0, 0.0]]))
        assert np.array_equal(out, np.array([[0.5, 0.5]]))

    def test_extreme_magnitudes_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_against_high_precision_oracle(self):
        row = [1.0, 2.0, 3.0]
        with mpmath.workdps(50):
            exps = [mpmath.exp(v) for v in row]
            total = sum(exps)
            expected = [float(e / total) for e in exps]
        out = softmax_rows(np.array([row]))
        np.testing.assert_allclose(out[0], expected, rtol=1e-12)

    def test_rows_sum_to_one_bulk(self, rng):
        m = rng.uniform(-1e3, 1e3, size=(10_000, 7))
        sums = softmax_rows(m).sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-9


class TestCrossEntropy:
    def test_perfect_prediction(self):
        probs = np.array([[0.0, 1.0, 0.0]])
        assert cross_entropy(probs, np.array([1])) == 0.0

    def test_uniform_is_log_n(self):
        n = 7
        probs = np.full((3, n), 1.0 / n)
        assert cross_entropy(probs, np.array([0, 3, 6])) == pytest.approx(math.log(n))

    def test_against_scalar_loop(self, rng):
        probs = softmax_rows(rng.standard_normal((4, 5)))
        labels = rng.integers(0, 5, size=4)
        expected = sum(-math.log(probs[i, labels[i]]) for i in range(4)) / 4
        assert cross_entropy(probs, labels) == pytest.approx(expected, rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            cross_entropy(np.array([[0.5, 0.5]]), np.array([2]))

    def test_gradient_matches_finite_differences(self, rng):
        # d/dlogits CE(softmax(logits), y) must equal (softmax - onehot)/batch.
        logits = rng.standard_normal((3, 4))
        labels = rng.integers(0, 4, size=3)
        analytic = (softmax_rows(logits) - one_hot(labels, 4).T) / 3.0
        step = 1e-5
        for i in range(3):
            for j in range(4):
                up, down = logits.copy(), logits.copy()
                up[i, j] += step
                down[i, j] -= step
                fd = (
                    cross_entropy(softmax_rows(up), labels)
                    - cross_entropy(softmax_rows(down), labels)
                ) / (2 * step)
                denom = max(abs(fd), abs(analytic[i, j]), 1e-8)
                assert abs(fd - analytic[i, j]) / denom < 1e-4


class TestL2NormalizeRows:
    def test_3_4_5_triangle(self):
        out = l2_normalize_rows(np.array([[3.0, 4.0]]))
        assert np.array_equal(out, np.array([[0.6, 0.8]]))

    def test_idempotent(self, rng):
        m = l2_normalize_rows(rng.standard_normal((6, 9)))
        again = l2_normalize_rows(m)
        assert np.abs(again - m).max() < 1e-12

    def test_unit_norms(self, rng):
        out = l2_normalize_rows(rng.standard_normal((5, 8)))
        assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() < 1e-12

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize_rows(np.array([[0.0, 0.0], [1.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_softmax_rows_are_distributions(rows, cols, seed):
    g = np.random.Generator(np.random.PCG64(seed))
    out = softmax_rows(g.uniform(-1e3, 1e3, size=(rows, cols)))
    assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-9
    assert (out >= 0).all()


def test_one_hot_columns():
    out = one_hot(np.array([2, 0, 1]), 3)
    assert out.shape == (3, 3)
    assert np.array_equal(out.sum(axis=0), np.ones(3))
    assert out[2, 0] == 1.0 and out[0, 1] == 1.0 and out[1, 2] == 1.0
    with pytest.raises(LabelError):
        one_hot(np.array([3]), 3)
