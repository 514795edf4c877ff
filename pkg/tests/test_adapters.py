import numpy as np
import pytest

from loramix.adapters import (AttachMode, ExpertSet, attach_block,
                              attach_component, compose, compose_batch,
                              compose_batch_backward, expert_update)
from loramix.numkit import ConfigError, Rng, ShapeError


def make_bank(d=6, r=2, n=3, seed=0, scale=1.0, randomize=True):
    rng = Rng(seed)
    es = ExpertSet.create(d, r, n, rng, scale=scale)
    if randomize:
        for i in range(n):
            es.b[i] = rng.child(f"b{i}").normal((d, r), std=0.7)
    return es


def uniform_pi(n, g):
    return np.full((n, g), 1.0 / n)


# ---------------------------------------------------------------------------
# expert_update
# ---------------------------------------------------------------------------

def test_expert_update_zero_b():
    es = make_bank(randomize=False)
    assert np.array_equal(expert_update(es, 1, np.ones(6)), np.zeros(6))


def test_expert_update_identity_composition():
    # A = identity padded to (r, d), B = identity padded to (d, r)
    d, r = 4, 2
    a = np.zeros((r, d))
    a[:, :r] = np.eye(r)
    b = np.zeros((d, r))
    b[:r, :] = np.eye(r)
    es = ExpertSet(a=a, b=[b], scale=1.0)
    e1 = np.zeros(d)
    e1[0] = 1.0
    assert np.array_equal(expert_update(es, 0, e1), e1)


def test_expert_update_hand_case():
    es = ExpertSet(a=np.array([[1.0, 1.0]]), b=[np.array([[2.0], [3.0]])])
    out = expert_update(es, 0, np.array([1.0, 0.0]))
    assert np.array_equal(out, [2.0, 3.0])


def test_expert_update_index_error():
    es = make_bank()
    with pytest.raises(IndexError):
        expert_update(es, 3, np.ones(6))


# ---------------------------------------------------------------------------
# compose
# ---------------------------------------------------------------------------

def test_compose_uniform_identical_experts():
    es = make_bank(n=4)
    for i in range(1, 4):
        es.b[i] = es.b[0].copy()
    x = Rng(1).normal(6)
    delta = compose(es, uniform_pi(4, 3), x)
    assert np.allclose(delta, expert_update(es, 0, x), atol=1e-12)


def test_compose_grouped_hand_case():
    # experts produce [1,1,1,1] and [2,2,2,2]; groups select one each
    d = 4
    a = np.eye(d)
    es = ExpertSet(a=a, b=[np.eye(d), 2.0 * np.eye(d)])
    x = np.ones(d)
    pi = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(compose(es, pi, x), [1.0, 1.0, 2.0, 2.0])


def test_compose_one_hot_selects_expert():
    es = make_bank(n=3)
    x = Rng(4).normal(6)
    pi = np.zeros((3, 2))
    pi[1, :] = 1.0
    assert np.allclose(compose(es, pi, x), expert_update(es, 1, x), atol=1e-14)


def test_compose_group_mismatch_rejected():
    es = make_bank(d=6)
    with pytest.raises(ConfigError):
        compose(es, np.full((3, 4), 0.25), np.ones(6))  # 4 does not divide 6


def test_compose_scalar_equals_weighted_sum():
    # g=1 reduces to plain scalar mixing of expert updates
    es = make_bank(n=3, seed=9)
    rng = Rng(2)
    for _ in range(50):
        x = rng.normal(6)
        w = np.abs(rng.normal(3)) + 1e-3
        w /= w.sum()
        ref = sum(w[i] * expert_update(es, i, x) for i in range(3))
        assert np.abs(compose(es, w[:, None], x) - ref).max() <= 1e-12


def test_compose_linear_in_experts():
    es1 = make_bank(seed=3)
    es2 = make_bank(seed=4)
    es_sum = make_bank(seed=3)
    for i in range(3):
        es_sum.b[i] = es1.b[i] + es2.b[i]
    es2.a = es1.a.copy()
    es_sum.a = es1.a.copy()
    x = Rng(8).normal(6)
    pi = uniform_pi(3, 2)
    lhs = compose(es_sum, pi, x)
    rhs = compose(es1, pi, x) + compose(es2, pi, x)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_compose_batch_matches_per_sample():
    es = make_bank(d=8, r=3, n=4, seed=12, scale=1.3)
    rng = Rng(5)
    x = rng.normal((3, 5, 8))
    pi = np.abs(rng.normal((3, 4, 2))) + 0.1
    pi /= pi.sum(axis=1, keepdims=True)
    delta, _ = compose_batch(es, pi, x)
    for b in range(3):
        for s in range(5):
            assert np.allclose(delta[b, s], compose(es, pi[b], x[b, s]), atol=1e-12)


def test_compose_batch_backward_matches_finite_differences():
    from loramix.numkit import finite_diff_grad
    es = make_bank(d=6, r=2, n=2, seed=21)
    rng = Rng(6)
    x = rng.normal((2, 3, 6))
    pi = np.abs(rng.normal((2, 2, 3))) + 0.1
    pi /= pi.sum(axis=1, keepdims=True)
    w = rng.normal((2, 3, 6))  # random linear functional of delta

    delta, cache = compose_batch(es, pi, x)
    dx, da, db, dpi = compose_batch_backward(es, cache, w)

    def loss_with_b(i):
        def f(vec):
            old = es.b[i]
            es.b[i] = vec.reshape(6, 2)
            out, _ = compose_batch(es, pi, x)
            es.b[i] = old
            return float((w * out).sum())
        return f

    for i in range(2):
        fd = finite_diff_grad(loss_with_b(i), es.b[i].ravel()).reshape(6, 2)
        assert np.abs(db[i] - fd).max() <= 1e-7

    def loss_with_a(vec):
        old = es.a
        es.a = vec.reshape(2, 6)
        out, _ = compose_batch(es, pi, x)
        es.a = old
        return float((w * out).sum())

    fd = finite_diff_grad(loss_with_a, es.a.ravel()).reshape(2, 6)
    assert np.abs(da - fd).max() <= 1e-7

    def loss_with_pi(vec):
        out, _ = compose_batch(es, vec.reshape(2, 2, 3), x)
        return float((w * out).sum())

    fd = finite_diff_grad(loss_with_pi, pi.ravel()).reshape(2, 2, 3)
    assert np.abs(dpi - fd).max() <= 1e-7


# ---------------------------------------------------------------------------
# attachment
# ---------------------------------------------------------------------------

def test_attach_block_zero_delta_is_plain_residual():
    h = np.array([1.0, 2.0])
    f = np.array([0.5, -0.5])
    out = attach_block(h, f, np.zeros(2))
    assert np.array_equal(out, h + f)


def test_attach_block_zero_block():
    h = np.array([1.0, 2.0])
    delta = np.array([0.1, 0.2])
    assert np.array_equal(attach_block(h, np.zeros(2), delta), h + delta)


def test_attach_block_hand_sum():
    out = attach_block([1.0, 0.0], [0.0, 1.0], [1.0, 1.0])
    assert np.array_equal(out, [2.0, 2.0])


def test_attach_block_shape_error():
    with pytest.raises(ShapeError):
        attach_block(np.zeros(2), np.zeros(3), np.zeros(2))


def test_attach_component_zero_bank_is_plain_projection():
    es = make_bank(randomize=False)
    w = Rng(3).normal((6, 6))
    x = Rng(4).normal(6)
    out = attach_component(w, es, uniform_pi(3, 1), x)
    assert np.allclose(out, w @ x, atol=1e-15)


def test_attach_component_isolated_expert():
    es = make_bank(n=1, seed=5)
    x = Rng(6).normal(6)
    out = attach_component(np.zeros((6, 6)), es, np.ones((1, 1)), x)
    assert np.allclose(out, expert_update(es, 0, x), atol=1e-14)


def test_attach_component_matrix_form_oracle():
    # single expert, g=1: equals (W + scale * B A) x
    es = make_bank(n=1, seed=7, scale=1.7)
    rng = Rng(9)
    w = rng.normal((6, 6))
    x = rng.normal(6)
    ref = (w + 1.7 * es.b[0] @ es.a) @ x
    out = attach_component(w, es, np.ones((1, 1)), x)
    assert np.allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------------------
# orthogonality carry
# ---------------------------------------------------------------------------

def test_orthogonality_carries_through_shared_projection():
    rng = Rng(17)
    for trial in range(100):
        d, r = 12, 3
        # build B_i, B_j with exactly orthogonal column spaces
        g = rng.child(f"g{trial}").normal((d, 2 * r))
        q = np.zeros_like(g)
        for j in range(2 * r):
            v = g[:, j].copy()
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
            q[:, j] = v / np.sqrt(v @ v)
        bi = q[:, :r] @ rng.child(f"ri{trial}").normal((r, r))
        bj = q[:, r:] @ rng.child(f"rj{trial}").normal((r, r))
        a = rng.child(f"a{trial}").normal((r, d))
        carried = np.linalg.norm(a.T @ bi.T @ bj @ a)
        bound = (np.linalg.norm(a) ** 2) * np.linalg.norm(bi) * np.linalg.norm(bj)
        assert carried <= 1e-10 * bound


def test_attach_mode_parsing():
    assert AttachMode.parse("block-ffn") is AttachMode.BLOCK_FFN
    with pytest.raises(ConfigError):
        AttachMode.parse("block")
