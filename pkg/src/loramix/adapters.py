"""Asymmetric adapter bank: one shared down-projection feeding per-task
up-projections, with routed composition and both attachment styles
(residual around a whole sub-block, or inside the q/v projections)."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numkit import ConfigError, Rng, ShapeError, as_matrix


class AttachMode(Enum):
    BLOCK_ATTN = "block-attn"
    BLOCK_FFN = "block-ffn"
    BLOCK_BOTH = "block-both"
    COMPONENT_QV = "component-qv"

    @classmethod
    def parse(cls, text: str) -> "AttachMode":
        for mode in cls:
            if mode.value == text:
                return mode
        raise ConfigError(f"unknown attach mode {text!r}; expected one of "
                          f"{[m.value for m in cls]}")


@dataclass
class ExpertSet:
    """Shared down-projection ``a`` (rank x hidden) plus one up-projection
    per expert (hidden x rank). ``scale`` multiplies every expert output."""

    a: np.ndarray
    b: list = field(default_factory=list)
    scale: float = 1.0

    def __post_init__(self):
        self.a = as_matrix(self.a)
        self.b = [as_matrix(bi) for bi in self.b]
        r, d = self.a.shape
        if r > d:
            raise ConfigError(f"ExpertSet: rank {r} exceeds hidden dim {d}")
        if not self.b:
            raise ConfigError("ExpertSet: need at least one expert")
        for i, bi in enumerate(self.b):
            if bi.shape != (d, r):
                raise ShapeError(f"ExpertSet: expert {i} has shape {bi.shape}, expected {(d, r)}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def hidden(self) -> int:
        return self.a.shape[1]

    @property
    def n_experts(self) -> int:
        return len(self.b)

    @classmethod
    def create(cls, hidden: int, rank: int, n_experts: int, rng: Rng,
               scale: float = 1.0) -> "ExpertSet":
        # Down-projection gets a normal init, up-projections start at zero so
        # the adapted model is exactly the frozen base before training.
        a = rng.normal((rank, hidden), std=1.0 / np.sqrt(hidden))
        b = [np.zeros((hidden, rank)) for _ in range(n_experts)]
        return cls(a=a, b=b, scale=scale)

    def b_stack(self) -> np.ndarray:
        return np.stack(self.b)  # (n, hidden, rank)


def expert_update(es: ExpertSet, i: int, x) -> np.ndarray:
    """Single expert output on one vector: scale * B_i (A x)."""
    if not 0 <= i < es.n_experts:
        raise IndexError(f"expert index {i} out of range [0, {es.n_experts})")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (es.hidden,):
        raise ShapeError(f"expert_update: x has shape {x.shape}, expected ({es.hidden},)")
    return es.scale * (es.b[i] @ (es.a @ x))


def _check_groups(es: ExpertSet, pi: np.ndarray) -> int:
    if pi.ndim != 2 or pi.shape[0] != es.n_experts:
        raise ConfigError(f"routing weights shape {pi.shape} inconsistent with "
                          f"{es.n_experts} experts")
    g = pi.shape[1]
    if es.hidden % g != 0:
        raise ConfigError(f"group count {g} does not divide hidden dim {es.hidden}")
    return g


def compose(es: ExpertSet, pi, x) -> np.ndarray:
    """Routed sum of expert outputs for one vector.

    Each expert's per-group weight is repeated hidden/g times and multiplied
    elementwise into that expert's update. With g=1 this reduces exactly to a
    scalar-weighted sum of expert updates.
    """
    pi = np.asarray(pi, dtype=np.float64)
    g = _check_groups(es, pi)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (es.hidden,):
        raise ShapeError(f"compose: x has shape {x.shape}, expected ({es.hidden},)")
    z = es.a @ x
    weights = np.repeat(pi, es.hidden // g, axis=1)  # (n, hidden)
    outs = es.scale * np.einsum("ndr,r->nd", es.b_stack(), z)
    return (weights * outs).sum(axis=0)


def compose_batch(es: ExpertSet, pi, x):
    """Batched composition over (batch, seq, hidden) inputs with per-sample
    routing weights (batch, n, g). Returns (delta, cache) where the cache
    carries the intermediates the backward pass needs.

    Because the update is linear in the up-projections, the per-sample,
    per-group mix of expert matrices is formed first; this keeps the cost
    independent of expert count along the sequence axis.
    """
    x = np.asarray(x, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != es.hidden:
        raise ShapeError(f"compose_batch: x has shape {x.shape}")
    if pi.ndim != 3 or pi.shape[1] != es.n_experts:
        raise ShapeError(f"compose_batch: pi has shape {pi.shape}")
    g = pi.shape[2]
    if es.hidden % g != 0:
        raise ConfigError(f"group count {g} does not divide hidden dim {es.hidden}")
    bsz, seq, d = x.shape
    n, r = es.n_experts, es.rank
    z = x @ es.a.T                                        # (B, S, r)
    # per-sample mixed matrices: m[b] = scale * sum_i bcast(pi[b,i]) * B_i
    bg = es.b_stack().reshape(n, g, (d // g) * r)
    mixed = es.scale * np.matmul(pi.transpose(2, 0, 1), bg.transpose(1, 0, 2))
    mixed = mixed.transpose(1, 0, 2).reshape(bsz, d, r)   # (B, d, r)
    delta = np.matmul(z, mixed.transpose(0, 2, 1))        # (B, S, d)
    return delta, {"x": x, "z": z, "mixed": mixed, "pi": pi, "g": g}


def compose_batch_backward(es: ExpertSet, cache, ddelta):
    """Reverse-mode step for compose_batch.

    Returns (dx, da, db_list, dpi) for upstream gradient ddelta of shape
    (batch, seq, hidden).
    """
    x, z, mixed, pi, g = (cache["x"], cache["z"], cache["mixed"], cache["pi"],
                          cache["g"])
    bsz, seq, d = x.shape
    n, r = es.n_experts, es.rank
    ddelta = np.asarray(ddelta, dtype=np.float64)
    dmixed = np.matmul(ddelta.transpose(0, 2, 1), z)      # (B, d, r)
    dz = np.matmul(ddelta, mixed)                         # (B, S, r)
    dmg = dmixed.reshape(bsz, g, (d // g) * r)
    bg = es.b_stack().reshape(n, g, (d // g) * r)
    dpi = es.scale * np.matmul(dmg.transpose(1, 0, 2),
                               bg.transpose(1, 2, 0)).transpose(1, 2, 0)
    dbg = es.scale * np.matmul(pi.transpose(2, 1, 0), dmg.transpose(1, 0, 2))
    dbs = dbg.transpose(1, 0, 2).reshape(n, d, r)
    db = [dbs[i] for i in range(n)]
    z2 = dz.reshape(bsz * seq, r)
    da = z2.T @ x.reshape(bsz * seq, d)
    dx = (dz @ es.a).reshape(bsz, seq, d)
    return dx, da, db, dpi


def attach_block(h_in, block_out, delta) -> np.ndarray:
    """Residual attachment: input + frozen sub-block output + routed update.

    The caller guarantees block_out and delta were both computed from the
    same normalized view of h_in.
    """
    h_in = np.asarray(h_in, dtype=np.float64)
    block_out = np.asarray(block_out, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if h_in.shape != block_out.shape or h_in.shape != delta.shape:
        raise ShapeError(f"attach_block: mismatched shapes {h_in.shape}, "
                         f"{block_out.shape}, {delta.shape}")
    return h_in + block_out + delta


def attach_component(w, es: ExpertSet, pi, x) -> np.ndarray:
    """Adapted projection: W x plus the routed update, applied inside the
    attention computation (q or v path)."""
    w = as_matrix(w)
    x = np.asarray(x, dtype=np.float64)
    if w.shape[1] != x.shape[-1]:
        raise ShapeError(f"attach_component: W {w.shape} does not accept x {x.shape}")
    return w @ x + compose(es, pi, x)
