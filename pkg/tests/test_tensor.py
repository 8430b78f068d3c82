import math

import numpy as np
import pytest

from repfuse.errors import DomainError, ShapeError
from repfuse.tensor import layer_norm, matmul, matrix, softmax_rows, svd_symmetric


class TestMatmul:
    def test_identity(self):
        a = matrix([[1, 2], [3, 4]])
        np.testing.assert_array_equal(matmul(np.eye(2, dtype=np.float32), a), a)

    def test_hand_product(self):
        out = matmul(matrix([[1, 2]]), matrix([[3], [4]]))
        np.testing.assert_array_equal(out, [[11.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\) x \(2, 3\)"):
            matmul(np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32))

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = matrix(rng.normal(0, 1, (4, 6)))
            b = matrix(rng.normal(0, 1, (6, 3)))
            c = matrix(rng.normal(0, 1, (3, 5)))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            err = np.linalg.norm(left - right) / np.linalg.norm(right)
            assert err < 1e-4


class TestSoftmaxRows:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-7)

    def test_large_entries_stable(self):
        out = softmax_rows([[1000.0, 0.0]])
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-7)

    def test_hand_evaluated_row(self):
        # exp(ln 2) = 2, so the row normalizes to [2/3, 1/3]
        out = softmax_rows([[math.log(2.0), 0.0]])
        np.testing.assert_allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-7)

    def test_rows_sum_to_one_even_at_1e4(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = rng.uniform(-1e4, 1e4, (5, 7))
            sums = softmax_rows(m).astype(np.float64).sum(axis=1)
            assert np.abs(sums - 1.0).max() < 1e-6


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        out = layer_norm([[3.0, 3.0, 3.0]], np.ones(3), np.zeros(3))
        np.testing.assert_allclose(out, np.zeros((1, 3)), atol=1e-6)

    def test_already_normalized_row(self):
        out = layer_norm([[1.0, -1.0]], np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)

    def test_zero_gain_gives_bias(self):
        bias = np.array([0.5, -2.0, 7.0])
        out = layer_norm([[1.0, 2.0, 3.0], [9.0, -1.0, 0.0]], np.zeros(3), bias)
        np.testing.assert_allclose(out, np.broadcast_to(bias, (2, 3)), atol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm([[1.0, 2.0]], np.ones(3), np.zeros(3))

    def test_rows_standardized_before_affine(self):
        rng = np.random.default_rng(2)
        m = rng.normal(3, 5, (6, 32))
        out = layer_norm(m, np.ones(32), np.zeros(32)).astype(np.float64)
        assert np.abs(out.mean(axis=1)).max() < 1e-5
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-3


class TestSvdSymmetric:
    def test_diagonal(self):
        w, v = svd_symmetric(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(np.abs(v), np.eye(2), atol=1e-12)

    def test_hand_characteristic_polynomial(self):
        # det([[2-x, 1], [1, 2-x]]) = (2-x)^2 - 1 -> eigenvalues 3 and 1
        w, _ = svd_symmetric([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-12)

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError):
            svd_symmetric(np.zeros((3, 2), np.float32))

    def test_asymmetry_rejected(self):
        with pytest.raises(DomainError):
            svd_symmetric([[1.0, 0.5], [0.0, 1.0]])

    @pytest.mark.parametrize("n", [2, 5, 17])
    def test_reconstruction_and_orthonormality(self, n):
        rng = np.random.default_rng(n)
        a = rng.normal(0, 1, (n, n))
        a = ((a + a.T) / 2).astype(np.float32)
        w, v = svd_symmetric(a)
        assert (np.diff(w) <= 1e-12).all()
        recon = v @ np.diag(w) @ v.T
        assert np.linalg.norm(a - recon) / np.linalg.norm(a) < 1e-6
        assert np.linalg.norm(v.T @ v - np.eye(n)) < 1e-5


class TestMatrixConstructor:
    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            matrix([[1.0, np.nan]])

    def test_rejects_1d(self):
        with pytest.raises(ShapeError):
            matrix([1.0, 2.0])
