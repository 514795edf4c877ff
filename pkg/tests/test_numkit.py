import numpy as np
import pytest

from loramix.numkit import (ConfigError, DomainError, NumericError, Rng,
                            ShapeError, finite_diff_grad, jacobi_eigh,
                            layernorm, matmul, softmax, svd_thin)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_hand_case():
    out = matmul([[1.0, 2.0], [3.0, 4.0]], [[0.0], [1.0]])
    assert np.array_equal(out, [[2.0], [4.0]])


def test_matmul_zero_case():
    out = matmul(np.zeros((2, 3)), np.arange(3.0).reshape(3, 1))
    assert np.array_equal(out, np.zeros((2, 1)))
    assert np.isfinite(out).all()


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_symmetry():
    assert np.allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_large_inputs_no_overflow():
    out = softmax([1000.0, 0.0])
    assert np.isfinite(out).all()
    assert out[0] > 1.0 - 1e-12
    assert out[1] < 1e-12


def test_softmax_closed_form():
    out = softmax([np.log(2.0), 0.0])
    assert np.allclose(out, [2 / 3, 1 / 3], atol=1e-12)


def test_softmax_probability_vector_property():
    rng = Rng(7)
    for scale in (1.0, 1e3):
        for _ in range(200):
            x = rng.normal(5, std=scale)
            p = softmax(x)
            assert (p >= 0).all()
            assert abs(p.sum() - 1.0) <= 1e-12


def test_softmax_nan_rejected():
    with pytest.raises(NumericError):
        softmax([np.nan, 0.0])


# ---------------------------------------------------------------------------
# layernorm
# ---------------------------------------------------------------------------

def test_layernorm_constant_input_is_zero():
    out = layernorm(np.full(6, 3.7), np.ones(6), np.zeros(6))
    assert np.allclose(out, 0.0, atol=1e-12)


def test_layernorm_unit_variance_fixed_point():
    x = np.array([1.0, -1.0])
    out = layernorm(x, np.ones(2), np.zeros(2), eps=1e-12)
    assert np.allclose(out, x, atol=1e-9)


def test_layernorm_gamma_zero_gives_beta():
    beta = np.array([2.0, -1.0, 0.5])
    out = layernorm([9.0, 1.0, 4.0], np.zeros(3), beta)
    assert np.allclose(out, beta, atol=1e-15)


def test_layernorm_statistics():
    rng = Rng(3)
    x = rng.normal((4, 16), std=5.0)
    out = layernorm(x, np.ones(16), np.zeros(16), eps=1e-10)
    assert np.abs(out.mean(axis=-1)).max() <= 1e-10
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_layernorm_zero_length_rejected():
    with pytest.raises(ShapeError):
        layernorm(np.zeros(0), np.zeros(0), np.zeros(0))


# ---------------------------------------------------------------------------
# svd_thin
# ---------------------------------------------------------------------------

def test_svd_diagonal_case():
    res = svd_thin(np.diag([3.0, 0.0]))
    assert np.allclose(res.s, [3.0, 0.0], atol=1e-12)


def test_svd_isometry_case():
    rng = Rng(11)
    g = rng.normal((20, 6))
    # orthonormalize columns by hand so the oracle is independent of svd_thin
    q = np.zeros_like(g)
    for j in range(6):
        v = g[:, j].copy()
        for i in range(j):
            v -= (q[:, i] @ v) * q[:, i]
        q[:, j] = v / np.sqrt(v @ v)
    res = svd_thin(q)
    assert np.abs(res.s - 1.0).max() <= 1e-10


def test_svd_matches_gram_eigenvalue_oracle():
    rng = Rng(23)
    m = rng.normal((16, 4))
    res = svd_thin(m)
    oracle = np.sqrt(np.maximum(np.linalg.eigvalsh(m.T @ m), 0.0))[::-1]
    assert np.allclose(res.s, oracle, atol=1e-9)


def test_svd_invariants_random_matrices():
    rng = Rng(5)
    for _ in range(300):
        rows = int(rng.integers(1, 65))
        cols = int(rng.integers(1, 17))
        if rng.uniform() < 0.5:
            rows, cols = cols, rows
        m = rng.normal((rows, cols))
        res = svd_thin(m)
        k = min(rows, cols)
        denom = max(np.linalg.norm(m), 1e-300)
        assert np.linalg.norm(res.reconstruct() - m) / denom <= 1e-10
        assert np.abs(res.u.T @ res.u - np.eye(k)).max() <= 1e-8
        assert np.abs(res.v.T @ res.v - np.eye(k)).max() <= 1e-8
        assert (np.diff(res.s) <= 1e-12).all()
        assert (res.s >= 0).all()


def test_svd_rank_deficient():
    m = np.outer(np.arange(1.0, 9.0), np.ones(3))
    res = svd_thin(m)
    assert np.linalg.norm(res.reconstruct() - m) <= 1e-10
    assert np.allclose(res.s[1:], 0.0, atol=1e-12)
    assert np.abs(res.u.T @ res.u - np.eye(3)).max() <= 1e-8


def test_svd_sign_convention_deterministic():
    rng = Rng(9)
    m = rng.normal((12, 5))
    a = svd_thin(m)
    b = svd_thin(m.copy())
    assert np.array_equal(a.u, b.u)
    assert np.array_equal(a.v, b.v)
    for k in range(5):
        peak = np.argmax(np.abs(a.u[:, k]))
        assert a.u[peak, k] > 0


def test_svd_rejects_oversized_and_nonfinite():
    with pytest.raises(ConfigError):
        svd_thin(np.zeros((65, 65)))
    with pytest.raises(NumericError):
        svd_thin(np.array([[np.inf, 0.0], [0.0, 1.0]]))


def test_jacobi_matches_numpy():
    rng = Rng(31)
    for _ in range(25):
        n = int(rng.integers(1, 17))
        a = rng.normal((n, n))
        a = a + a.T
        w, v = jacobi_eigh(a)
        assert np.allclose(np.sort(w), np.linalg.eigvalsh(a), atol=1e-10)
        assert np.allclose(v @ np.diag(w) @ v.T, a, atol=1e-10)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda p: float(p @ p), np.array([1.0, 2.0]))
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)


def test_finite_diff_constant():
    g = finite_diff_grad(lambda p: 4.2, np.array([0.3, -0.7, 1.1]))
    assert np.array_equal(g, np.zeros(3))


def test_finite_diff_exp_closed_form():
    g = finite_diff_grad(lambda p: float(np.exp(p).sum()), np.zeros(4))
    assert np.allclose(g, np.ones(4), atol=1e-8)


def test_finite_diff_nonfinite_rejected():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda p: float("nan"), np.zeros(2))


# ---------------------------------------------------------------------------
# rng
# ---------------------------------------------------------------------------

def test_rng_reproducible_streams():
    a = Rng(42)
    b = Rng(42)
    assert np.array_equal(a.normal(100), b.normal(100))
    assert np.array_equal(a.integers(0, 10, size=50), b.integers(0, 10, size=50))


def test_rng_children_are_stable_and_distinct():
    a = Rng(42).child("data")
    b = Rng(42).child("data")
    c = Rng(42).child("init")
    assert np.array_equal(a.normal(10), b.normal(10))
    assert not np.array_equal(Rng(42).child("data").normal(10), c.normal(10))
