"""Dense matrix kernels: stable nonlinearities, thin SVD, seeded RNG, and a
central-difference gradient oracle.

All routines work on float64 numpy arrays, are pure functions of their
inputs, and share no mutable state, so they can be called from multiple
threads. Serialization elsewhere narrows to float32; computation here never
does.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

MAX_SVD_DIM = 64  # thin SVD is restricted to min(rows, cols) <= 64


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class DomainError(ValueError):
    """Value lies outside the operation's mathematical domain."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(ArithmeticError):
    """Non-finite values or failed numerical convergence."""


class StateError(RuntimeError):
    """Operation invoked without its required prior state."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return a @ b


def softmax(x, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; safe for entries of magnitude ~1e3 and beyond."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise NumericError("softmax: NaN in input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ShapeError("layernorm: zero-length input")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layernorm: gamma/beta must match the feature axis")
    if eps <= 0:
        raise DomainError("layernorm: eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


class Rng:
    """Seeded PCG64 stream; identical seeds give identical draw sequences.

    ``child(tag)`` derives an independent, reproducible substream so that
    different consumers (data, init, shuffling) never share state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: str) -> "Rng":
        mixed = (self.seed * 0x9E3779B97F4A7C15 + zlib.crc32(tag.encode("utf-8"))) % (1 << 63)
        return Rng(mixed)

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        return std * self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


@dataclass
class SvdResult:
    """Thin SVD factors: ``u @ diag(s) @ v.T`` reconstructs the input."""

    u: np.ndarray  # (rows, k) orthonormal columns
    s: np.ndarray  # (k,) nonnegative, descending
    v: np.ndarray  # (cols, k) orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Returns (eigenvalues, eigenvectors) unordered; ``a = V diag(w) V.T``.
    Raises NumericError with the residual if the off-diagonal mass does not
    fall below ``tol * ||a||_F`` within ``max_sweeps`` sweeps.
    """
    a = as_matrix(a).copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError("jacobi_eigh: matrix must be square")
    v = np.eye(n)
    if n == 1:
        return np.array([a[0, 0]]), v
    norm = np.sqrt((a * a).sum())
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * (np.tril(a, -1) ** 2).sum())
        if off <= tol * norm:
            return np.diag(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = 1.0 / (tau - np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J and V <- V J with the (p,q) Givens rotation J.
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    off = np.sqrt(2.0 * (np.tril(a, -1) ** 2).sum())
    raise NumericError(f"jacobi_eigh: no convergence after {max_sweeps} sweeps, residual {off:.3e}")


def _complete_basis(u: np.ndarray, cols: list[int]) -> None:
    """Fill the listed columns of u with unit vectors orthonormal to the rest."""
    d = u.shape[0]
    taken = [j for j in range(u.shape[1]) if j not in cols]
    for j in cols:
        for cand in range(d):
            vec = np.zeros(d)
            vec[cand] = 1.0
            for t in taken:
                vec -= (u[:, t] @ vec) * u[:, t]
            nrm = np.sqrt(vec @ vec)
            if nrm > 0.5:
                u[:, j] = vec / nrm
                taken.append(j)
                break
        else:
            raise NumericError("svd_thin: basis completion failed")


def _tie_order(s: np.ndarray, v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Descending order on s; ties broken by the first differing entry of the
    corresponding v column (larger entry first) so reports are deterministic."""
    idx = list(np.argsort(-s, kind="stable"))
    changed = True
    while changed:
        changed = False
        for a in range(len(idx) - 1):
            i, j = idx[a], idx[a + 1]
            if abs(s[i] - s[j]) > tol:
                continue
            diff = v[:, i] - v[:, j]
            nz = np.nonzero(np.abs(diff) > tol)[0]
            if nz.size and diff[nz[0]] < 0.0:
                idx[a], idx[a + 1] = j, i
                changed = True
    return np.array(idx)


def svd_thin(m) -> SvdResult:
    """Thin SVD via eigendecomposition of the small-side Gram matrix.

    Valid because the small dimension is capped at 64; the Gram matrix is
    k x k with k = min(rows, cols), so squaring never costs precision we
    need at these scales. Singular vectors are sign-fixed (largest-magnitude
    entry of each u column positive) and ties in s are ordered
    deterministically.
    """
    m = as_matrix(m)
    if not np.isfinite(m).all():
        raise NumericError("svd_thin: non-finite input")
    rows, cols = m.shape
    if min(rows, cols) > MAX_SVD_DIM:
        raise ConfigError(f"svd_thin: min dimension {min(rows, cols)} exceeds {MAX_SVD_DIM}")
    transpose = rows < cols
    work = m.T if transpose else m

    gram = work.T @ work  # k x k
    evals, evecs = jacobi_eigh(gram)
    sraw = np.sqrt(np.maximum(evals, 0.0))
    order = _tie_order(sraw, evecs)
    s = sraw[order]
    v = evecs[:, order]

    smax = s[0] if s.size else 0.0
    cutoff = smax * 1e-14
    u = np.zeros((work.shape[0], s.size))
    dead: list[int] = []
    for k in range(s.size):
        col = work @ v[:, k]
        nrm = np.sqrt(col @ col)
        if s[k] <= cutoff or nrm <= cutoff:
            s[k] = 0.0
            dead.append(k)
        else:
            u[:, k] = col / nrm
            s[k] = nrm  # direct norm is more accurate than sqrt(eigenvalue)
    # One modified Gram-Schmidt pass keeps u orthonormal even when small
    # singular values cluster.
    for k in range(s.size):
        if k in dead:
            continue
        for j in range(k):
            if j in dead:
                continue
            u[:, k] -= (u[:, j] @ u[:, k]) * u[:, j]
        nrm = np.sqrt(u[:, k] @ u[:, k])
        if nrm <= cutoff:
            s[k] = 0.0
            dead.append(k)
        else:
            u[:, k] /= nrm
    if dead:
        _complete_basis(u, dead)
        order2 = _tie_order(s, v)
        s = s[order2]
        u = u[:, order2]
        v = v[:, order2]

    if transpose:
        u, v = v, u
    for k in range(s.size):
        peak = np.argmax(np.abs(u[:, k]))
        if u[peak, k] < 0.0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]
    return SvdResult(u=u, s=s, v=v)


def finite_diff_grad(f, p, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("finite_diff_grad: p must be a flat vector")
    g = np.empty_like(p)
    for i in range(p.size):
        step = np.zeros_like(p)
        step[i] = h
        fp = float(f(p + step))
        fm = float(f(p - step))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_grad: non-finite evaluation at index {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
