import numpy as np
import pytest

from loramix.adapters import ExpertSet
from loramix.numkit import ConfigError, DomainError, Rng, finite_diff_grad, svd_thin
from loramix.spectral import (alignment_score, band_mass, band_partition,
                              build_report, reweight_projector, reweighted_b,
                              spectral_loss, spectral_weights,
                              suppression_report)


# ---------------------------------------------------------------------------
# spectral_weights
# ---------------------------------------------------------------------------

def test_weights_degenerate_zero_spectrum():
    sw = spectral_weights([0.0, 0.0])
    assert np.array_equal(sw.weights, [1.0, 1.0])


def test_weights_equal_sigmas():
    sw = spectral_weights([1.0, 1.0])
    assert sw.sigma_bar == 1.0
    assert np.allclose(sw.weights, np.exp(-1.0), atol=1e-15)


def test_weights_closed_form():
    sw = spectral_weights([2.0, 1.0])
    assert np.isclose(sw.sigma_bar, 1.5)
    assert np.allclose(sw.weights, [np.exp(-2 / 1.5), np.exp(-1 / 1.5)], atol=1e-12)
    assert np.allclose(sw.weights, [0.2636, 0.5134], atol=1e-4)


def test_weights_negative_rejected():
    with pytest.raises(DomainError):
        spectral_weights([1.0, -0.1])


def test_weights_monotone_decreasing_in_sigma():
    rng = Rng(2)
    for _ in range(100):
        s = np.abs(rng.normal(8)) + 1e-6
        w = spectral_weights(s).weights
        order = np.argsort(s)
        assert (np.diff(w[order]) < 0).all()
        assert (w > 0).all() and (w <= 1.0).all()


# ---------------------------------------------------------------------------
# reweighted_b / projector
# ---------------------------------------------------------------------------

def test_reweighted_zero_matrix():
    assert np.array_equal(reweighted_b(np.zeros((5, 2))), np.zeros((5, 2)))


def test_reweighted_identity_closed_form():
    out = reweighted_b(np.eye(2))
    assert np.allclose(out, np.exp(-0.5) * np.eye(2), atol=1e-12)


def test_reweighted_svd_roundtrip_oracle():
    rng = Rng(5)
    b = rng.normal((16, 4))
    before = svd_thin(b)
    w = spectral_weights(before.s).weights
    after = svd_thin(reweighted_b(b))
    assert np.allclose(after.s, np.sort(np.sqrt(w) * before.s)[::-1], atol=1e-10)


def test_reweighted_never_grows():
    rng = Rng(6)
    for _ in range(20):
        b = rng.normal((10, 3))
        assert np.linalg.norm(reweighted_b(b)) <= np.linalg.norm(b) + 1e-12


def test_projector_reproduces_reweighted_matrix():
    rng = Rng(7)
    b = rng.normal((12, 4))
    proj = reweight_projector(b)
    assert np.abs(proj.apply(b) - reweighted_b(b)).max() <= 1e-10


# ---------------------------------------------------------------------------
# spectral_loss
# ---------------------------------------------------------------------------

def _bank(bs, a=None):
    d, r = bs[0].shape
    a = np.eye(r, d) if a is None else a
    return ExpertSet(a=a, b=list(bs))


def test_loss_orthogonal_experts_zero():
    b1 = np.zeros((4, 2))
    b1[0, 0] = 1.0
    b2 = np.zeros((4, 2))
    b2[1, 1] = 1.0
    es = _bank([b1, b2])
    projs = [reweight_projector(b) for b in es.b]
    loss, grads = spectral_loss(es, projs, lambda1=1.0)
    assert loss <= 1e-20
    for g in grads:
        assert np.abs(g).max() <= 1e-12


def test_loss_identity_pair_closed_form():
    es = _bank([np.eye(2), np.eye(2)])
    projs = [reweight_projector(b) for b in es.b]
    loss, _ = spectral_loss(es, projs, lambda1=1.0)
    # both reweighted to exp(-1/2) I, cross-Gram exp(-1) I, squared norm 2 e^-2
    assert np.isclose(loss, 2.0 * np.exp(-2.0), atol=1e-12)
    assert np.isclose(loss, 0.2707, atol=1e-4)


def test_loss_gradient_matches_finite_differences():
    rng = Rng(9)
    d, r, n = 8, 2, 3
    es = _bank([rng.child(f"b{i}").normal((d, r)) for i in range(n)])
    projs = [reweight_projector(b) for b in es.b]
    _, grads = spectral_loss(es, projs, lambda1=0.7)

    for i in range(n):
        def f(vec, i=i):
            old = es.b[i]
            es.b[i] = vec.reshape(d, r)
            val, _ = spectral_loss(es, projs, lambda1=0.7)
            es.b[i] = old
            return val
        fd = finite_diff_grad(f, es.b[i].ravel()).reshape(d, r)
        rel = np.linalg.norm(grads[i] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-6


def test_loss_uniform_variant_gradient():
    rng = Rng(19)
    d, r, n = 6, 2, 3
    es = _bank([rng.child(f"b{i}").normal((d, r)) for i in range(n)])
    _, grads = spectral_loss(es, None, lambda1=0.3)
    for i in range(n):
        def f(vec, i=i):
            old = es.b[i]
            es.b[i] = vec.reshape(d, r)
            val, _ = spectral_loss(es, None, lambda1=0.3)
            es.b[i] = old
            return val
        fd = finite_diff_grad(f, es.b[i].ravel()).reshape(d, r)
        rel = np.linalg.norm(grads[i] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-6


def test_loss_permutation_symmetry_and_rotation_invariance():
    rng = Rng(29)
    d, r = 8, 2
    bs = [rng.child(f"b{i}").normal((d, r)) for i in range(3)]
    es = _bank(bs)
    projs = [reweight_projector(b) for b in es.b]
    loss, _ = spectral_loss(es, projs, lambda1=1.0)

    perm = [2, 0, 1]
    es_p = _bank([bs[i] for i in perm])
    loss_p, _ = spectral_loss(es_p, [projs[i] for i in perm], lambda1=1.0)
    assert np.isclose(loss, loss_p, atol=1e-12)

    # common orthogonal left rotation of the reweighted matrices: build it
    # via rotating the raw B's and their projectors' u factors
    g = rng.child("rot").normal((d, d))
    q = np.zeros_like(g)
    for j in range(d):
        v = g[:, j].copy()
        for i in range(j):
            v -= (q[:, i] @ v) * q[:, i]
        q[:, j] = v / np.sqrt(v @ v)
    es_r = _bank([q @ b for b in bs])
    projs_r = [reweight_projector(b) for b in es_r.b]
    loss_r, _ = spectral_loss(es_r, projs_r, lambda1=1.0)
    assert np.isclose(loss, loss_r, atol=1e-8)


def test_loss_nonnegative_and_zero_iff_orthogonal():
    rng = Rng(39)
    es = _bank([rng.child(f"b{i}").normal((6, 2)) for i in range(3)])
    projs = [reweight_projector(b) for b in es.b]
    loss, _ = spectral_loss(es, projs, lambda1=1.0)
    assert loss > 0


def test_loss_projector_count_mismatch():
    es = _bank([np.eye(2), np.eye(2)])
    with pytest.raises(ConfigError):
        spectral_loss(es, [reweight_projector(np.eye(2))], lambda1=1.0)


# ---------------------------------------------------------------------------
# alignment / bands
# ---------------------------------------------------------------------------

def test_alignment_identical_experts():
    u = np.zeros((5, 1))
    u[2, 0] = 1.0
    res = [svd_thin(u), svd_thin(u.copy())]
    assert np.isclose(alignment_score(res, [0]), 1.0, atol=1e-12)


def test_alignment_orthogonal_experts():
    u1 = np.zeros((5, 1))
    u1[0, 0] = 1.0
    u2 = np.zeros((5, 1))
    u2[3, 0] = 1.0
    assert alignment_score([svd_thin(u1), svd_thin(u2)], [0]) == 0.0


def test_alignment_matches_double_loop_oracle():
    rng = Rng(41)
    svds = [svd_thin(rng.child(f"m{i}").normal((10, 2))) for i in range(3)]
    band = [0, 1]
    total = 0.0
    for k in band:
        for i in range(3):
            for j in range(3):
                if i != j:
                    cos = abs(svds[i].u[:, k] @ svds[j].u[:, k])
                    total += svds[i].s[k] * svds[j].s[k] * cos
    oracle = total / (len(band) * 3 * 2)
    assert np.isclose(alignment_score(svds, band), oracle, atol=1e-12)


def test_alignment_sign_flip_invariant():
    rng = Rng(43)
    svds = [svd_thin(rng.child(f"m{i}").normal((8, 2))) for i in range(2)]
    before = alignment_score(svds, [0, 1])
    svds[0].u[:, 0] *= -1.0
    assert np.isclose(alignment_score(svds, [0, 1]), before, atol=1e-14)


def test_alignment_needs_two_experts():
    with pytest.raises(DomainError):
        alignment_score([svd_thin(np.eye(3))], [0])


def test_band_mass_cases():
    assert np.isclose(band_mass([3.0, 1.0], [0]), 0.75)
    assert band_mass([3.0, 1.0], [0, 1]) == 1.0
    assert band_mass([3.0, 1.0], []) == 0.0
    with pytest.raises(DomainError):
        band_mass([0.0, 0.0], [0])


def test_band_partition_boundaries():
    assert band_partition(10) == [[0, 1], [2, 3, 4], [5, 6, 7, 8, 9]]
    assert band_partition(4) == [[0], [1], [2, 3]]
    bands = band_partition(7)
    assert sorted(sum(bands, [])) == list(range(7))


def test_band_mass_partition_sums_to_one():
    rng = Rng(51)
    for _ in range(30):
        s = np.abs(rng.normal(9)) + 1e-9
        total = sum(band_mass(s, band) for band in band_partition(9))
        assert np.isclose(total, 1.0, atol=1e-10)


# ---------------------------------------------------------------------------
# suppression
# ---------------------------------------------------------------------------

def _report_from(bs_by_site):
    return build_report({site: [svd_thin(b) for b in bs]
                         for site, bs in bs_by_site.items()})


def test_suppression_identity():
    rng = Rng(61)
    bs = [rng.child(f"b{i}").normal((10, 4)) for i in range(3)]
    rep = _report_from({"site0": bs})
    supp = suppression_report(rep, rep)
    for band in supp["bands"]:
        assert band["mean_rel_change"] == 0.0 or band["mean_rel_change"] is None


def test_suppression_uniform_scale():
    rng = Rng(62)
    bs = [rng.child(f"b{i}").normal((10, 4)) for i in range(2)]
    before = _report_from({"s": bs})
    after = _report_from({"s": [0.9 * b for b in bs]})
    supp = suppression_report(before, after)
    for band in supp["bands"]:
        assert np.isclose(band["mean_rel_change"], -0.1, atol=1e-9)


def test_suppression_zero_reference_flagged():
    b = np.zeros((6, 2))
    b[0, 0] = 2.0  # rank one: second singular value is exactly zero
    before = _report_from({"s": [b]})
    after = _report_from({"s": [0.5 * b]})
    supp = suppression_report(before, after)
    assert supp["excluded_zero_reference"] >= 1
