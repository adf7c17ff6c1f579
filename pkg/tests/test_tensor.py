import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zdc.tensor import (ShapeError, SvdConvergenceError, kept_width, matmul, matrix_from_json,
                        matrix_to_json, pad_columns, random_orthogonal, read_matrix, softmax_rows, svd,
                        truncate_columns, write_matrix)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), b), b)

    def test_unit_vector_selection(self):
        assert np.array_equal(matmul([[1.0, 0.0]], [[2.0], [5.0]]), [[2.0]])

    def test_matches_triple_loop_exactly(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
        assert np.array_equal(matmul(a, b), triple_loop(a, b))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"2x3 by 2x3"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(arrays(np.float64, (4, 6), elements=finite), arrays(np.float64, (6, 5), elements=finite),
           st.integers(0, 4), st.integers(1, 5))
    def test_slicing_commutes_bitwise(self, a, b, r0, c1):
        full = matmul(a, b)
        assert np.array_equal(matmul(a[r0:], b[:, :c1]), full[r0:, :c1])

    def test_orthogonal_rotation_preserves_scores(self):
        rng = np.random.default_rng(2)
        q, k = rng.standard_normal((9, 8)), rng.standard_normal((9, 8))
        r = random_orthogonal(8, rng)
        ref = matmul(q, k.T)
        rot = matmul(matmul(q, r), matmul(k, r).T)
        assert np.linalg.norm(rot - ref) <= 1e-9 * np.linalg.norm(ref)


class TestSvd:
    def test_diagonal(self):
        res = svd(np.diag([3.0, 1.0]))
        assert np.allclose(res.sigma, [3.0, 1.0])
        for m in (res.u, res.r_mat):
            assert np.allclose(np.abs(m), np.eye(2))

    def test_diagonal_needs_reordering(self):
        res = svd(np.diag([1.0, 3.0]))
        assert np.allclose(res.sigma, [3.0, 1.0])
        assert np.allclose(np.abs(res.r_mat), [[0, 1], [1, 0]])
        assert np.allclose(res.reconstruct(), np.diag([1.0, 3.0]))

    def test_zero_matrix(self):
        res = svd(np.zeros((4, 4)))
        assert np.array_equal(res.sigma, np.zeros(4))
        assert np.allclose(res.u.T @ res.u, np.eye(4))
        assert np.allclose(res.r_mat.T @ res.r_mat, np.eye(4))

    def test_tall_random_against_eigensolver(self):
        a = np.random.default_rng(3).standard_normal((50, 8))
        res = svd(a)
        assert np.linalg.norm(res.reconstruct() - a) < 1e-8 * np.linalg.norm(a)
        oracle = np.sqrt(np.clip(scipy.linalg.eigh(a.T @ a, eigvals_only=True)[::-1], 0, None))
        assert np.allclose(res.sigma, oracle, rtol=0, atol=1e-7)

    def test_wide_input(self):
        a = np.random.default_rng(4).standard_normal((3, 7))
        res = svd(a)
        assert res.u.shape == (3, 3) and res.r_mat.shape == (7, 3)
        assert np.allclose(res.reconstruct(), a, atol=1e-12)

    def test_rank_deficient_keeps_orthonormal_u(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((10, 2)) @ rng.standard_normal((2, 6))
        res = svd(a)
        assert np.allclose(res.u.T @ res.u, np.eye(6), atol=1e-9)
        assert np.allclose(res.reconstruct(), a, atol=1e-10)

    def test_non_convergence_carries_residual(self):
        a = np.random.default_rng(6).standard_normal((12, 8))
        with pytest.raises(SvdConvergenceError) as info:
            svd(a, max_sweeps=1)
        assert info.value.residual > 1e-12 and info.value.sweeps == 1

    def test_rejects_non_finite_and_empty(self):
        with pytest.raises(ValueError):
            svd([[1.0, np.nan]])
        with pytest.raises(ShapeError):
            svd(np.zeros((0, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_invariants(self, m, n, seed):
        a = np.random.default_rng(seed).standard_normal((m, n))
        res = svd(a)
        r = min(m, n)
        assert res.sigma.shape == (r,)
        assert np.all(res.sigma >= 0) and np.all(np.diff(res.sigma) <= 0)
        assert np.allclose(res.u.T @ res.u, np.eye(r), atol=1e-9)
        assert np.allclose(res.r_mat.T @ res.r_mat, np.eye(r), atol=1e-9)
        assert np.linalg.norm(res.reconstruct() - a) <= 1e-8 * max(np.linalg.norm(a), 1e-300)


def naive_softmax(a, causal):
    rows, cols = a.shape
    probs, denoms = np.zeros_like(a), np.zeros(rows)
    for i in range(rows):
        limit = i + cols - rows + 1 if causal else cols
        s = sum(math.exp(a[i, j]) for j in range(limit))
        denoms[i] = s
        for j in range(limit):
            probs[i, j] = math.exp(a[i, j]) / s
    return probs, denoms


class TestSoftmax:
    def test_zero_row(self):
        p, d = softmax_rows([[0.0, 0.0]])
        assert np.allclose(p, [[0.5, 0.5]]) and np.isclose(d[0], 2.0)

    def test_log_two_row(self):
        p, d = softmax_rows([[math.log(2.0), 0.0]])
        assert np.allclose(p, [[2 / 3, 1 / 3]], atol=1e-15) and np.isclose(d[0], 3.0, rtol=1e-12)

    @pytest.mark.parametrize("causal", [False, True])
    def test_against_naive(self, causal):
        a = np.random.default_rng(7).standard_normal((6, 6)) * 3
        p, d = softmax_rows(a, causal=causal)
        p0, d0 = naive_softmax(a, causal)
        assert np.allclose(p, p0, rtol=0, atol=1e-12)
        assert np.allclose(d, d0, rtol=1e-9, atol=0)

    def test_decode_rows_see_prefix(self):
        a = np.random.default_rng(8).standard_normal((2, 5))
        p, d = softmax_rows(a, causal=True)
        p0, d0 = naive_softmax(a, True)
        assert np.allclose(p, p0) and np.allclose(d, d0)
        assert p[0, 4] == 0.0 and p[1, 4] > 0

    def test_large_scores_stay_finite(self):
        p, d = softmax_rows([[500.0, 499.0]])
        assert np.all(np.isfinite(p)) and np.isclose(p.sum(), 1.0)
        assert np.isclose(d[0], math.exp(500) * (1 + math.exp(-1)), rtol=1e-12)

    def test_fully_masked_row(self):
        with pytest.raises(ValueError, match="fully masked"):
            softmax_rows([[1.0, 2.0]], mask=[[False, False]])

    @given(arrays(np.float64, (5, 7), elements=finite), st.booleans())
    def test_rows_sum_to_one(self, a, causal):
        p, d = softmax_rows(a, causal=causal)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(d > 0)


class TestTruncation:
    @pytest.mark.parametrize("n,p,want", [(8, 0.0, 8), (8, 0.5, 4), (8, 0.3, 6), (10, 0.7, 3),
                                          (8, 0.99, 1), (16, 0.1, 15)])
    def test_kept_width(self, n, p, want):
        assert kept_width(n, p) == want

    def test_kept_width_rejects_out_of_range(self):
        for p in (-0.1, 1.0):
            with pytest.raises(ValueError):
                kept_width(8, p)

    def test_examples(self):
        a = np.arange(8.0).reshape(2, 4)
        assert np.array_equal(truncate_columns(a, 0.5), a[:, :2])
        assert np.array_equal(truncate_columns(a, 0.0), a)
        assert truncate_columns(np.ones((3, 8)), 0.3).shape == (3, 6)

    @given(st.floats(0, 0.99), st.integers(0, 2**32 - 1))
    def test_truncation_equals_truncated_rotation(self, p, seed):
        rng = np.random.default_rng(seed)
        b, r = rng.standard_normal((4, 6)), random_orthogonal(6, rng)
        w = kept_width(6, p)
        assert np.array_equal(truncate_columns(matmul(b, r), p), matmul(b, r[:, :w]))

    def test_pad_round_trip(self):
        a = np.ones((2, 3))
        padded = pad_columns(a, 5)
        assert np.array_equal(padded[:, :3], a) and not padded[:, 3:].any()
        with pytest.raises(ShapeError):
            pad_columns(a, 2)


class TestSerialization:
    def test_binary_layout(self, tmp_path):
        a = np.array([[1.0, -2.5, 3.0]])
        path = tmp_path / "m.zdcm"
        write_matrix(path, a)
        raw = path.read_bytes()
        assert raw[:4] == b"ZDCM" and raw[4:12] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(raw) == 12 + 24
        assert np.array_equal(read_matrix(path), a)

    def test_bad_magic_and_length(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError, match="magic"):
            read_matrix(path)
        path.write_bytes(b"ZDCM" + (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + bytes(8))
        with pytest.raises(ValueError, match="expected 4"):
            read_matrix(path)

    @given(arrays(np.float64, (3, 2), elements=finite))
    def test_json_round_trip(self, a):
        assert np.array_equal(matrix_from_json(matrix_to_json(a)), a)
