"""Singular-value-aware orthogonality regularization and the spectrum
analytics built on it: reweighting projectors, the pairwise loss with its
analytic gradient, per-band mass/alignment scores, and suppression deltas
between two training states."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapters import ExpertSet
from .numkit import ConfigError, DomainError, SvdResult, as_matrix, svd_thin

# Report-time band boundaries as fractions of the singular-value index range.
DEFAULT_BAND_FRACTIONS = (0.2, 0.5)
BAND_LABELS = ("top-20%", "20-50%", "50-100%")


@dataclass
class SpectralWeighting:
    sigma_bar: float
    weights: np.ndarray


def spectral_weights(sigmas) -> SpectralWeighting:
    """Exponential decay weights exp(-sigma/mean): near 1 for small singular
    values, near 0 for dominant ones. All-zero spectra get weights of 1."""
    s = np.asarray(sigmas, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DomainError("spectral_weights: need a nonempty 1-d array")
    if (s < 0).any():
        raise DomainError("spectral_weights: negative singular value")
    bar = float(s.mean())
    if bar == 0.0:
        return SpectralWeighting(0.0, np.ones_like(s))
    return SpectralWeighting(bar, np.exp(-s / bar))


@dataclass
class ReweightProjector:
    """Low-rank factors of M = U diag(sqrt(w)) U^T, the epoch-frozen map that
    sends an up-projection B to its reweighted form M B."""

    u: np.ndarray        # (hidden, rank)
    sqrt_w: np.ndarray   # (rank,)

    def apply(self, b) -> np.ndarray:
        b = as_matrix(b)
        return self.u @ (self.sqrt_w[:, None] * (self.u.T @ b))


def reweight_projector(b) -> ReweightProjector:
    res = svd_thin(b)
    w = spectral_weights(res.s).weights
    return ReweightProjector(u=res.u, sqrt_w=np.sqrt(w))


def reweighted_b(b) -> np.ndarray:
    """Rescale each singular value sigma_k to sqrt(w(sigma_k)) * sigma_k."""
    res = svd_thin(b)
    w = spectral_weights(res.s).weights
    return (res.u * (np.sqrt(w) * res.s)) @ res.v.T


def spectral_loss(es: ExpertSet, projectors, lambda1: float):
    """Pairwise squared cross-Gram penalty over reweighted up-projections.

    ``projectors`` holds one ReweightProjector per expert, computed from an
    earlier snapshot and treated as constants here (no differentiation
    through the SVD factors); pass None to penalize the raw matrices, which
    is the uniform orthogonal-regularization baseline.

    Returns (loss, grads) with one gradient array per expert.
    """
    if lambda1 < 0:
        raise DomainError("spectral_loss: lambda1 must be nonnegative")
    n = es.n_experts
    if projectors is not None and len(projectors) != n:
        raise ConfigError(f"spectral_loss: {len(projectors)} projectors for {n} experts")
    if projectors is None:
        p = [bi.copy() for bi in es.b]
    else:
        p = [projectors[i].apply(es.b[i]) for i in range(n)]
    loss = 0.0
    grads = [np.zeros_like(bi) for bi in es.b]
    for i in range(n):
        for j in range(i + 1, n):
            cross = p[i].T @ p[j]
            loss += float((cross * cross).sum())
            gi = 2.0 * (p[j] @ cross.T)
            gj = 2.0 * (p[i] @ cross)
            if projectors is None:
                grads[i] += gi
                grads[j] += gj
            else:
                grads[i] += projectors[i].apply(gi)
                grads[j] += projectors[j].apply(gj)
    loss *= lambda1
    for g in grads:
        g *= lambda1
    return loss, grads


def band_partition(k: int, fractions=DEFAULT_BAND_FRACTIONS) -> list[list[int]]:
    """Split indices 0..k-1 at the given fractions. A boundary landing on an
    integer index assigns that index to the later (lower-sigma) band."""
    cuts = []
    for f in fractions:
        x = f * k
        cut = int(round(x)) if abs(x - round(x)) < 1e-9 else math.ceil(x)
        cuts.append(min(max(cut, 0), k))
    cuts = sorted(cuts)
    edges = [0] + cuts + [k]
    return [list(range(edges[i], edges[i + 1])) for i in range(len(edges) - 1)]


def band_mass(sigmas, band) -> float:
    """Fraction of the total singular-value sum carried by the band."""
    s = np.asarray(sigmas, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        raise DomainError("band_mass: all-zero spectrum")
    idx = list(band)
    if not idx:
        return 0.0
    return float(s[idx].sum() / total)


def alignment_score(experts: list[SvdResult], band) -> float:
    """Singular-value-weighted alignment of same-index singular vectors
    across expert pairs, averaged over the band.

    Sign-free: uses |cos| between u columns, and a zero column counts as
    cos = 0.
    """
    n = len(experts)
    if n < 2:
        raise DomainError("alignment_score: need at least two experts")
    idx = list(band)
    if not idx:
        raise DomainError("alignment_score: empty band")
    total = 0.0
    for k in idx:
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                ui = experts[i].u[:, k]
                uj = experts[j].u[:, k]
                ni = np.sqrt(ui @ ui)
                nj = np.sqrt(uj @ uj)
                if ni <= 1e-300 or nj <= 1e-300:
                    continue
                cos = abs(float(ui @ uj)) / (ni * nj)
                total += experts[i].s[k] * experts[j].s[k] * cos
    return total / (len(idx) * n * (n - 1))


def build_report(site_svds: dict, fractions=DEFAULT_BAND_FRACTIONS) -> dict:
    """Assemble the JSON-ready spectrum report for a set of adapter sites.

    ``site_svds`` maps a site key to the list of per-expert SvdResults.
    """
    sites = {}
    for key in sorted(site_svds):
        svds = site_svds[key]
        k = len(svds[0].s)
        bands = band_partition(k, fractions)
        sigmas = [svd.s.tolist() for svd in svds]
        masses = []
        aligns = []
        for band in bands:
            per_expert = []
            for svd in svds:
                if svd.s.sum() > 0:
                    per_expert.append(band_mass(svd.s, band))
            masses.append(float(np.mean(per_expert)) if per_expert else None)
            if len(svds) >= 2 and band:
                aligns.append(alignment_score(svds, band))
            else:
                aligns.append(None)
        sites[key] = {
            "sigmas": sigmas,
            "band_mass": masses,
            "band_alignment": aligns,
        }
    return {
        "fractions": list(fractions),
        "bands": list(BAND_LABELS[: len(fractions) + 1]),
        "sites": sites,
    }


def suppression_report(before: dict, after: dict) -> dict:
    """Per-band mean relative singular-value change between two spectrum
    reports with matching sites and expert counts. Indices whose reference
    value is zero are excluded and counted."""
    if set(before["sites"]) != set(after["sites"]):
        raise ConfigError("suppression_report: site sets differ")
    if before["fractions"] != after["fractions"]:
        raise ConfigError("suppression_report: band fractions differ")
    n_bands = len(before["fractions"]) + 1
    deltas: list[list[float]] = [[] for _ in range(n_bands)]
    excluded = 0
    for key in sorted(before["sites"]):
        sig_b = before["sites"][key]["sigmas"]
        sig_a = after["sites"][key]["sigmas"]
        if len(sig_b) != len(sig_a):
            raise ConfigError(f"suppression_report: expert count differs at {key}")
        for eb, ea in zip(sig_b, sig_a):
            if len(eb) != len(ea):
                raise ConfigError(f"suppression_report: spectrum length differs at {key}")
            bands = band_partition(len(eb), tuple(before["fractions"]))
            for b_idx, band in enumerate(bands):
                for k in band:
                    if eb[k] == 0.0:
                        excluded += 1
                        continue
                    deltas[b_idx].append((ea[k] - eb[k]) / eb[k])
    out_bands = []
    for b_idx in range(n_bands):
        vals = deltas[b_idx]
        out_bands.append({
            "band": before["bands"][b_idx] if b_idx < len(before["bands"]) else str(b_idx),
            "mean_rel_change": float(np.mean(vals)) if vals else None,
            "count": len(vals),
        })
    return {"bands": out_bands, "excluded_zero_reference": excluded}
