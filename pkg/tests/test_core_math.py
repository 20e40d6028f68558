import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from archlearn.core_math import (DimensionError, IterationLimitError, SeededRng, jacobi_svd,
                                 matmul, svd_truncate)

M64 = (1 << 64) - 1


def splitmix64_ref(seed, n):
    """Scalar splitmix64 written from its definition."""
    s, out = seed, []
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & M64
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += float(a[i, k]) * float(b[k, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_bit_equal_to_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(7, 13)), rng.normal(size=(13, 5))
        np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(DimensionError):
            matmul(np.ones(3), np.ones((3, 1)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32))
    def test_close_to_blas(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        np.testing.assert_allclose(matmul(a, b), a @ b, rtol=1e-12, atol=1e-12)

    def test_empty_inner_dimension(self):
        np.testing.assert_array_equal(matmul(np.ones((2, 0)), np.ones((0, 3))), np.zeros((2, 3)))


class TestSeededRng:
    def test_matches_reference_stream(self):
        for seed in (0, 1, 12345, M64):
            assert SeededRng(seed).next_u64(6).tolist() == splitmix64_ref(seed, 6)

    def test_published_first_value(self):
        assert int(SeededRng(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF

    def test_split_draws_equal_one_block(self):
        a, b = SeededRng(9), SeededRng(9)
        joined = np.concatenate([a.next_u64(3), a.next_u64(5)])
        np.testing.assert_array_equal(joined, b.next_u64(8))
        assert a.state == b.state

    def test_uniform_range_and_mean(self):
        u = SeededRng(1).uniform(20000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.01

    def test_normal_moments(self):
        z = SeededRng(2).normal(20001)
        assert len(z) == 20001
        assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03

    @given(st.integers(0, 500), st.integers(0, M64))
    def test_permutation_is_bijection(self, n, seed):
        p = SeededRng(seed).permutation(n)
        assert sorted(p.tolist()) == list(range(n))

    def test_integers_in_range(self):
        x = SeededRng(4).integers(7, 5000)
        assert x.min() == 0 and x.max() == 6

    def test_fork_is_independent_of_parent_future(self):
        parent = SeededRng(5)
        child = parent.fork()
        assert child.state != parent.state
        assert not np.array_equal(child.next_u64(4), parent.next_u64(4))

    def test_negative_count(self):
        with pytest.raises(ValueError):
            SeededRng(0).next_u64(-1)


def _check_svd(m, u, s, v, tol=1e-10):
    k = len(s)
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, m, atol=tol * max(1.0, np.abs(m).max()))
    np.testing.assert_allclose(u.T @ u, np.eye(k), atol=tol)
    np.testing.assert_allclose(v.T @ v, np.eye(k), atol=tol)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)


class TestJacobiSvd:
    @pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (8, 8), (9, 4), (30, 17)])
    def test_matches_lapack(self, shape):
        m = np.random.default_rng(sum(shape)).normal(size=shape)
        u, s, v = jacobi_svd(m)
        _check_svd(m, u, s, v)
        np.testing.assert_allclose(s, np.linalg.svd(m, compute_uv=False), rtol=1e-10, atol=1e-12)

    def test_rank_deficient(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 6))
        u, s, v = jacobi_svd(m)
        _check_svd(m, u, s, v)
        assert np.all(s[2:] < 1e-10)

    def test_zero_matrix(self):
        u, s, v = jacobi_svd(np.zeros((4, 3)))
        _check_svd(np.zeros((4, 3)), u, s, v)
        np.testing.assert_array_equal(s, 0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32))
    def test_reconstruction_property(self, r, c, seed):
        m = np.random.default_rng(seed).normal(size=(r, c))
        _check_svd(m, *jacobi_svd(m))

    def test_iteration_limit(self):
        m = np.random.default_rng(1).normal(size=(6, 6))
        with pytest.raises(IterationLimitError) as info:
            jacobi_svd(m, max_sweeps=1)
        assert info.value.residual > 0

    def test_truncate_diagonal(self):
        u, s, v = svd_truncate(np.diag([3.0, 2.0, 1.0]), 2)
        np.testing.assert_allclose(s, [3.0, 2.0])
        err = np.linalg.norm(np.diag([3.0, 2.0, 1.0]) - u @ np.diag(s) @ v.T, 2)
        assert err == pytest.approx(1.0)

    def test_truncation_error_is_next_singular_value(self):
        m = np.random.default_rng(7).normal(size=(12, 9))
        full = np.linalg.svd(m, compute_uv=False)
        for k in (1, 4, 8):
            u, s, v = svd_truncate(m, k)
            assert np.linalg.norm(m - u @ np.diag(s) @ v.T, 2) == pytest.approx(full[k], rel=1e-9)

    @pytest.mark.parametrize("rank", [0, 4, -1])
    def test_truncate_bad_rank(self, rank):
        with pytest.raises(ValueError):
            svd_truncate(np.ones((3, 3)), rank)
