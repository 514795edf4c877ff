"""Fine-grained router: a 2-layer perceptron over mean-pooled hidden states
emitting per-group expert weights, plus the load-balance loss and routing
entropy metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import ConfigError, DomainError, Rng, ShapeError, relu, softmax


@dataclass
class RouterParams:
    w1: np.ndarray   # (hidden, router_hidden)
    b1: np.ndarray   # (router_hidden,)
    w2: np.ndarray   # (router_hidden, n_experts * groups)
    b2: np.ndarray   # (n_experts * groups,)
    n_experts: int
    groups: int

    def __post_init__(self):
        if self.w2.shape[1] != self.n_experts * self.groups:
            raise ConfigError(f"router output dim {self.w2.shape[1]} != "
                              f"n_experts*groups = {self.n_experts * self.groups}")

    @classmethod
    def create(cls, hidden: int, n_experts: int, groups: int, rng: Rng,
               router_hidden: int | None = None) -> "RouterParams":
        h = router_hidden if router_hidden is not None else max(hidden // 2, 1)
        w1 = rng.normal((hidden, h), std=1.0 / np.sqrt(hidden))
        w2 = rng.normal((h, n_experts * groups), std=1.0 / np.sqrt(h))
        return cls(w1=w1, b1=np.zeros(h), w2=w2, b2=np.zeros(n_experts * groups),
                   n_experts=n_experts, groups=groups)


def route(rp: RouterParams, hidden_states) -> np.ndarray:
    """Routing weights (n_experts, groups) for one sequence of hidden states.

    Mean-pools over positions, runs the MLP, and normalizes over the expert
    axis independently within each group, so every group's weights form a
    simplex over experts.
    """
    h = np.asarray(hidden_states, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.ndim != 2 or h.shape[0] == 0:
        raise ShapeError(f"route: need a nonempty (seq, hidden) input, got {h.shape}")
    pooled = h.mean(axis=0)
    act = relu(pooled @ rp.w1 + rp.b1)
    logits = (act @ rp.w2 + rp.b2).reshape(rp.n_experts, rp.groups)
    return softmax(logits, axis=0)


def route_batch(rp: RouterParams, h):
    """Batched routing over (batch, seq, hidden); returns (pi, cache)."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3 or h.shape[1] == 0:
        raise ShapeError(f"route_batch: need (batch, seq, hidden), got {h.shape}")
    pooled = h.mean(axis=1)                            # (B, d)
    pre = pooled @ rp.w1 + rp.b1                       # (B, h_r)
    act = relu(pre)
    logits = (act @ rp.w2 + rp.b2).reshape(-1, rp.n_experts, rp.groups)
    pi = softmax(logits, axis=1)
    return pi, {"seq_len": h.shape[1], "pooled": pooled, "pre": pre, "act": act, "pi": pi}


def route_batch_backward(rp: RouterParams, cache, dpi):
    """Reverse-mode step for route_batch: gradient w.r.t. router parameters
    and the hidden-state input."""
    pi, act, pre, pooled = cache["pi"], cache["act"], cache["pre"], cache["pooled"]
    inner = (dpi * pi).sum(axis=1, keepdims=True)
    dlogits = (pi * (dpi - inner)).reshape(pi.shape[0], -1)  # (B, n*g)
    grads = {
        "w2": act.T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }
    dact = dlogits @ rp.w2.T
    dpre = dact * (pre > 0)
    grads["w1"] = pooled.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    dpooled = dpre @ rp.w1.T
    seq = cache["seq_len"]
    dh = np.repeat(dpooled[:, None, :], seq, axis=1) / seq
    return grads, dh


def broadcast(pi_row, d: int) -> np.ndarray:
    """Repeat each of g group weights d/g times to cover the feature axis."""
    pi_row = np.asarray(pi_row, dtype=np.float64)
    g = pi_row.shape[-1]
    if d % g != 0:
        raise ConfigError(f"broadcast: {g} groups do not divide dim {d}")
    return np.repeat(pi_row, d // g, axis=-1)


def check_simplex(pi, tol: float = 1e-9) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 2:
        raise ShapeError(f"routing weights must be 2-d (experts, groups), got {pi.shape}")
    if (pi < -tol).any():
        raise DomainError("routing weights contain negative entries")
    col = pi.sum(axis=0)
    if np.abs(col - 1.0).max() > tol:
        raise DomainError(f"routing weights do not sum to 1 per group "
                          f"(max dev {np.abs(col - 1.0).max():.2e})")
    return pi


def routing_entropy(pi) -> float:
    """Natural-log entropy over experts, averaged across groups; 0 log 0 := 0."""
    pi = check_simplex(pi)
    p = np.clip(pi, 0.0, None)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float((-plogp.sum(axis=0)).mean())


def balance_loss(mean_usage, lambda2: float):
    """Squared deviation of mean expert usage from uniform, scaled by the
    expert count. Zero exactly when usage is uniform.

    Returns (loss, dloss_dusage) so callers can chain the gradient through
    the routing softmax.
    """
    u = np.asarray(mean_usage, dtype=np.float64)
    n = u.shape[0]
    if n == 0:
        raise DomainError("balance_loss: no experts")
    if lambda2 < 0:
        raise DomainError("balance_loss: lambda2 must be nonnegative")
    dev = u - 1.0 / n
    loss = lambda2 * n * float(dev @ dev)
    grad = 2.0 * lambda2 * n * dev
    return loss, grad


@dataclass
class RoutingStats:
    """Aggregated routing behaviour: per-expert mean usage and the per-sample
    entropy values it was computed from."""

    mean_usage: np.ndarray
    entropies: np.ndarray

    @classmethod
    def from_weights(cls, pis) -> "RoutingStats":
        pis = np.asarray(pis, dtype=np.float64)
        if pis.ndim != 3 or pis.shape[0] == 0:
            raise ShapeError(f"RoutingStats: need (batch, experts, groups), got {pis.shape}")
        usage = pis.mean(axis=(0, 2))
        ents = np.array([routing_entropy(pis[b]) for b in range(pis.shape[0])])
        return cls(mean_usage=usage, entropies=ents)

    def mean_entropy(self) -> float:
        return float(self.entropies.mean())

    def entropy_histogram(self, bins: int = 32) -> dict:
        n = self.mean_usage.shape[0]
        top = float(np.log(n)) if n > 1 else 1.0
        counts, edges = np.histogram(self.entropies, bins=bins, range=(0.0, top))
        return {"bin_edges": edges.tolist(), "counts": counts.tolist()}

    def to_dict(self, bins: int = 32) -> dict:
        return {
            "mean_usage": self.mean_usage.tolist(),
            "mean_entropy": self.mean_entropy(),
            "entropy_histogram": self.entropy_histogram(bins),
            "samples": int(self.entropies.shape[0]),
        }
