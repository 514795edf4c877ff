"""Desk-scale frozen Pre-LN transformer with routed adapter banks.

The base network (embedding, two blocks, final norm) is seeded random and
never trained; the trainables are the adapter banks, one router per adapted
sub-block, and the per-task classification heads. Gradients are hand-derived
reverse-mode: forward() returns the activation cache that backward() consumes.

Attachment sites per mode:
  block-attn     parallel residual around the attention sub-block
  block-ffn      parallel residual around the FFN sub-block
  block-both     both of the above
  component-qv   adapters inside the q and v projections (so their gradients
                 pass through the attention softmax)
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .adapters import (AttachMode, ExpertSet, compose_batch,
                       compose_batch_backward)
from .numkit import (ConfigError, DomainError, Rng, ShapeError, StateError,
                     softmax)
from .routing import RouterParams, route_batch, route_batch_backward

LN_EPS = 1e-5

SITE_NAMES = {
    AttachMode.BLOCK_ATTN: ("attn",),
    AttachMode.BLOCK_FFN: ("ffn",),
    AttachMode.BLOCK_BOTH: ("attn", "ffn"),
    AttachMode.COMPONENT_QV: ("q", "v"),
}


@dataclass
class ModelConfig:
    n_tasks: int
    d: int = 32
    layers: int = 2
    heads: int = 2
    seq_len: int = 8
    classes: int = 4
    rank: int = 4
    groups: int = 1
    attach: AttachMode = AttachMode.BLOCK_BOTH
    scale: float = 1.0
    router_hidden: int | None = None
    train_a: bool = True

    def __post_init__(self):
        if isinstance(self.attach, str):
            self.attach = AttachMode.parse(self.attach)
        if self.n_tasks < 1:
            raise ConfigError("n_tasks must be >= 1")
        if self.d % self.heads != 0:
            raise ConfigError(f"hidden dim {self.d} not divisible by {self.heads} heads")
        if self.d % self.groups != 0:
            raise ConfigError(f"group count {self.groups} does not divide hidden dim {self.d}")
        if self.rank > self.d:
            raise ConfigError(f"rank {self.rank} exceeds hidden dim {self.d}")
        if self.layers < 1 or self.seq_len < 1 or self.classes < 2:
            raise ConfigError("layers >= 1, seq_len >= 1, classes >= 2 required")

    def site_names(self) -> tuple:
        return SITE_NAMES[self.attach]

    def site_keys(self) -> list[str]:
        return [f"block{l}.{name}" for l in range(self.layers)
                for name in self.site_names()]


@dataclass
class BlockWeights:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ffn_w1: np.ndarray
    ffn_w2: np.ndarray


@dataclass
class TaskHead:
    w: np.ndarray  # (d, classes)
    b: np.ndarray  # (classes,)


@dataclass
class AdapterSite:
    experts: ExpertSet
    router: RouterParams


@dataclass
class ModelParams:
    emb: np.ndarray
    pos: np.ndarray
    blocks: list
    lnf_gamma: np.ndarray
    lnf_beta: np.ndarray
    sites: dict = field(default_factory=dict)   # site key -> AdapterSite
    heads: list = field(default_factory=list)   # per task


def init_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    """Seeded construction: random frozen base scaled 1/sqrt(d), zero-init
    up-projections and heads so the untrained model equals the frozen base."""
    d, s = cfg.d, cfg.seq_len
    base = rng.child("base")
    std = 1.0 / np.sqrt(d)
    blocks = []
    for l in range(cfg.layers):
        brng = base.child(f"block{l}")
        blocks.append(BlockWeights(
            ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
            wq=brng.child("wq").normal((d, d), std),
            wk=brng.child("wk").normal((d, d), std),
            wv=brng.child("wv").normal((d, d), std),
            wo=brng.child("wo").normal((d, d), std),
            ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
            ffn_w1=brng.child("ffn_w1").normal((d, 4 * d), std),
            ffn_w2=brng.child("ffn_w2").normal((4 * d, d), 1.0 / np.sqrt(4 * d)),
        ))
    params = ModelParams(
        emb=base.child("emb").normal((d, d), std),
        pos=base.child("pos").normal((s, d), std),
        blocks=blocks,
        lnf_gamma=np.ones(d),
        lnf_beta=np.zeros(d),
    )
    for key in cfg.site_keys():
        srng = rng.child(f"site.{key}")
        params.sites[key] = AdapterSite(
            experts=ExpertSet.create(d, cfg.rank, cfg.n_tasks, srng.child("adapter"),
                                     scale=cfg.scale),
            router=RouterParams.create(d, cfg.n_tasks, cfg.groups, srng.child("router"),
                                       router_hidden=cfg.router_hidden),
        )
    params.heads = [TaskHead(w=np.zeros((d, cfg.classes)), b=np.zeros(cfg.classes))
                    for _ in range(cfg.n_tasks)]
    return params


def tensor_map(cfg: ModelConfig, params: ModelParams) -> dict:
    """Name -> array view of every trainable tensor, in deterministic order.
    Arrays are live references; in-place updates mutate the model."""
    out = {}
    for key in cfg.site_keys():
        site = params.sites[key]
        out[f"{key}.adapter.a"] = site.experts.a
        for i, bi in enumerate(site.experts.b):
            out[f"{key}.adapter.b{i}"] = bi
        out[f"{key}.router.w1"] = site.router.w1
        out[f"{key}.router.b1"] = site.router.b1
        out[f"{key}.router.w2"] = site.router.w2
        out[f"{key}.router.b2"] = site.router.b2
    for t, head in enumerate(params.heads):
        out[f"head{t}.w"] = head.w
        out[f"head{t}.b"] = head.b
    return out


def _ln_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def _ln_backward(dy, ln_cache):
    xhat, inv, gamma = ln_cache
    g = gamma * dy
    m1 = g.mean(axis=-1, keepdims=True)
    m2 = (g * xhat).mean(axis=-1, keepdims=True)
    return inv * (g - m1 - xhat * m2)


def _split_heads(x, heads):
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _uniform_pi(n_experts, groups, batch):
    return np.full((batch, n_experts, groups), 1.0 / n_experts)


def _site_forward(site: AdapterSite, u, routing: str):
    """Routing weights plus composed update for one site; u is the normalized
    hidden state that both the router and the adapters read."""
    if routing == "uniform":
        pi = _uniform_pi(site.router.n_experts, site.router.groups, u.shape[0])
        rcache = None
    else:
        pi, rcache = route_batch(site.router, u)
    delta, ccache = compose_batch(site.experts, pi, u)
    return delta, {"pi": pi, "rcache": rcache, "ccache": ccache}


def _site_backward(site: AdapterSite, scache, ddelta, extra_dpi, grads, key, train_a):
    """Backward through one site: adapter composition and, when the router is
    active, the routing MLP. Returns the gradient w.r.t. the site input u."""
    dx, da, db, dpi = compose_batch_backward(site.experts, scache["ccache"], ddelta)
    if train_a:
        grads[f"{key}.adapter.a"] = grads.get(f"{key}.adapter.a", 0) + da
    for i, dbi in enumerate(db):
        grads[f"{key}.adapter.b{i}"] = grads.get(f"{key}.adapter.b{i}", 0) + dbi
    if scache["rcache"] is not None:
        if extra_dpi is not None:
            dpi = dpi + extra_dpi
        rgrads, dh = route_batch_backward(site.router, scache["rcache"], dpi)
        for name, gval in rgrads.items():
            gkey = f"{key}.router.{name}"
            grads[gkey] = grads.get(gkey, 0) + gval
        dx = dx + dh
    return dx


def forward(cfg: ModelConfig, params: ModelParams, x, task_ids, routing: str = "learned"):
    """Run the adapted network; returns (logits, cache).

    routing="learned" uses each site's router; routing="uniform" fixes every
    expert weight at 1/N (static composition, router untouched).
    """
    x = np.asarray(x, dtype=np.float64)
    task_ids = np.asarray(task_ids)
    if x.ndim != 3 or x.shape[1] != cfg.seq_len or x.shape[2] != cfg.d:
        raise ShapeError(f"forward: x has shape {x.shape}, expected "
                         f"(batch, {cfg.seq_len}, {cfg.d})")
    if task_ids.shape != (x.shape[0],):
        raise ShapeError("forward: task_ids must be one id per batch element")
    if task_ids.min() < 0 or task_ids.max() >= cfg.n_tasks:
        raise DomainError(f"forward: task id out of range [0, {cfg.n_tasks})")
    if routing not in ("learned", "uniform"):
        raise ConfigError(f"forward: unknown routing mode {routing!r}")
    names = cfg.site_names()
    dh_head = cfg.d // cfg.heads

    h = x @ params.emb + params.pos[None]
    cache = {"x": x, "task_ids": task_ids, "routing": routing, "layers": []}
    for l in range(cfg.layers):
        blk = params.blocks[l]
        lc = {}
        u1, lc["ln1"] = _ln_forward(h, blk.ln1_gamma, blk.ln1_beta)
        lc["u1"] = u1
        q = u1 @ blk.wq
        k = u1 @ blk.wk
        v = u1 @ blk.wv
        if cfg.attach is AttachMode.COMPONENT_QV:
            dq, lc["site_q"] = _site_forward(params.sites[f"block{l}.q"], u1, routing)
            dv, lc["site_v"] = _site_forward(params.sites[f"block{l}.v"], u1, routing)
            q = q + dq
            v = v + dv
        qh, kh, vh = (_split_heads(t, cfg.heads) for t in (q, k, v))
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh_head)
        probs = softmax(scores, axis=-1)
        ctx = probs @ vh
        attn_out = _merge_heads(ctx) @ blk.wo
        lc.update(qh=qh, kh=kh, vh=vh, probs=probs)
        delta_a = 0.0
        if "attn" in names:
            delta_a, lc["site_attn"] = _site_forward(params.sites[f"block{l}.attn"], u1, routing)
        h_mid = h + attn_out + delta_a
        u2, lc["ln2"] = _ln_forward(h_mid, blk.ln2_gamma, blk.ln2_beta)
        lc["u2"] = u2
        act = np.tanh(u2 @ blk.ffn_w1)
        ffn_out = act @ blk.ffn_w2
        lc["ffn_act"] = act
        delta_f = 0.0
        if "ffn" in names:
            delta_f, lc["site_ffn"] = _site_forward(params.sites[f"block{l}.ffn"], u2, routing)
        h = h_mid + ffn_out + delta_f
        cache["layers"].append(lc)

    hf, cache["lnf"] = _ln_forward(h, params.lnf_gamma, params.lnf_beta)
    pooled = hf.mean(axis=1)
    cache["pooled"] = pooled
    w_stack = np.stack([head.w for head in params.heads])
    b_stack = np.stack([head.b for head in params.heads])
    logits = np.einsum("bd,bdk->bk", pooled, w_stack[task_ids]) + b_stack[task_ids]
    return logits, cache


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dloss_dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise DomainError("cross_entropy: label out of range")
    p = softmax(logits, axis=-1)
    picked = p[np.arange(bsz), labels]
    loss = float(-np.log(np.clip(picked, 1e-300, None)).mean())
    dlogits = p.copy()
    dlogits[np.arange(bsz), labels] -= 1.0
    return loss, dlogits / bsz


def backward(cfg: ModelConfig, params: ModelParams, cache, dlogits,
             extra_dpi: dict | None = None) -> dict:
    """Exact reverse-mode gradients for every trainable tensor.

    dlogits seeds the chain at the head outputs; extra_dpi optionally injects
    an additional gradient on each site's routing weights (the load-balance
    term enters there). Frozen base weights never appear in the result.
    """
    if cache is None:
        raise StateError("backward: missing forward cache")
    task_ids = cache["task_ids"]
    routing = cache["routing"]
    names = cfg.site_names()
    dh_head = cfg.d // cfg.heads
    extra_dpi = extra_dpi or {}
    grads: dict[str, np.ndarray] = {}

    pooled = cache["pooled"]
    dlogits = np.asarray(dlogits, dtype=np.float64)
    w_stack = np.stack([head.w for head in params.heads])
    for t in range(cfg.n_tasks):
        mask = task_ids == t
        if mask.any():
            grads[f"head{t}.w"] = pooled[mask].T @ dlogits[mask]
            grads[f"head{t}.b"] = dlogits[mask].sum(axis=0)
        else:
            grads[f"head{t}.w"] = np.zeros_like(params.heads[t].w)
            grads[f"head{t}.b"] = np.zeros_like(params.heads[t].b)
    dpooled = np.einsum("bk,bdk->bd", dlogits, w_stack[task_ids])
    seq = cache["x"].shape[1]
    dhf = np.repeat(dpooled[:, None, :], seq, axis=1) / seq
    dh = _ln_backward(dhf, cache["lnf"])

    for l in reversed(range(cfg.layers)):
        blk = params.blocks[l]
        lc = cache["layers"][l]
        # FFN sub-block: h_out = h_mid + ffn(u2) + delta_f(u2), u2 = LN2(h_mid)
        du2 = np.zeros_like(dh)
        if "ffn" in names:
            key = f"block{l}.ffn"
            du2 += _site_backward(params.sites[key], lc["site_ffn"], dh,
                                  extra_dpi.get(key), grads, key, cfg.train_a)
        act = lc["ffn_act"]
        dact = dh @ blk.ffn_w2.T
        dpre = dact * (1.0 - act * act)
        du2 += dpre @ blk.ffn_w1.T
        dh_mid = dh + _ln_backward(du2, lc["ln2"])

        # Attention sub-block: h_mid = h_in + attn(u1) [+ delta_a(u1)]
        du1 = np.zeros_like(dh)
        if "attn" in names:
            key = f"block{l}.attn"
            du1 += _site_backward(params.sites[key], lc["site_attn"], dh_mid,
                                  extra_dpi.get(key), grads, key, cfg.train_a)
        dctx = _split_heads(dh_mid @ blk.wo.T, cfg.heads)
        probs, qh, kh, vh = lc["probs"], lc["qh"], lc["kh"], lc["vh"]
        dprobs = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = dscores @ kh / np.sqrt(dh_head)
        dkh = dscores.transpose(0, 1, 3, 2) @ qh / np.sqrt(dh_head)
        dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
        if cfg.attach is AttachMode.COMPONENT_QV:
            key = f"block{l}.q"
            du1 += _site_backward(params.sites[key], lc["site_q"], dq,
                                  extra_dpi.get(key), grads, key, cfg.train_a)
            key = f"block{l}.v"
            du1 += _site_backward(params.sites[key], lc["site_v"], dv,
                                  extra_dpi.get(key), grads, key, cfg.train_a)
        du1 += dq @ blk.wq.T + dk @ blk.wk.T + dv @ blk.wv.T
        dh = dh_mid + _ln_backward(du1, lc["ln1"])

    return grads


def site_routing_weights(cache) -> dict:
    """Per-site routing weights recorded during the forward pass."""
    out = {}
    for l, lc in enumerate(cache["layers"]):
        for name in ("attn", "ffn", "q", "v"):
            sc = lc.get(f"site_{name}")
            if sc is not None:
                out[f"block{l}.{name}"] = sc["pi"]
    return out


def loss_and_grad(cfg: ModelConfig, params: ModelParams, x, task_ids, labels, *,
                  lambda1: float = 0.0, lambda2: float = 0.0,
                  projectors: dict | None = None, uniform_reg: bool = False,
                  routing: str = "learned"):
    """Total training loss (task + spectral + balance) and its gradients.

    ``projectors`` maps site keys to epoch-frozen per-expert reweighting
    projectors; with uniform_reg=True the spectral term penalizes raw
    up-projections instead. Returns (parts, grads, cache).
    """
    from .routing import balance_loss
    from .spectral import spectral_loss

    logits, cache = forward(cfg, params, x, task_ids, routing=routing)
    task_loss, dlogits = cross_entropy(logits, labels)

    balance_total = 0.0
    extra_dpi = {}
    if routing == "learned" and lambda2 > 0.0:
        for key, pi in site_routing_weights(cache).items():
            usage = pi.mean(axis=(0, 2))
            lb, dusage = balance_loss(usage, lambda2)
            balance_total += lb
            bsz, _, g = pi.shape
            extra_dpi[key] = np.broadcast_to(
                dusage[None, :, None] / (bsz * g), pi.shape).copy()

    grads = backward(cfg, params, cache, dlogits, extra_dpi=extra_dpi)

    spectral_total = 0.0
    if lambda1 > 0.0:
        for key in cfg.site_keys():
            es = params.sites[key].experts
            proj = None if uniform_reg else (projectors or {}).get(key)
            if not uniform_reg and proj is None:
                raise ConfigError(f"loss_and_grad: missing projectors for site {key}")
            ls, gb = spectral_loss(es, proj, lambda1)
            spectral_total += ls
            for i, gbi in enumerate(gb):
                gkey = f"{key}.adapter.b{i}"
                grads[gkey] = grads.get(gkey, 0) + gbi
    parts = {
        "task": task_loss,
        "spectral": spectral_total,
        "balance": balance_total,
        "total": task_loss + spectral_total + balance_total,
    }
    return parts, grads, cache


@dataclass
class SoftmaxJacobian:
    s: np.ndarray
    j: np.ndarray


def softmax_jacobian(s) -> SoftmaxJacobian:
    """Jacobian of a probability row w.r.t. its logits: diag(s) - s s^T.
    Rows sum to zero; the matrix vanishes exactly at one-hot rows."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError("softmax_jacobian: need a 1-d probability row")
    if (s < -1e-9).any() or abs(s.sum() - 1.0) > 1e-9:
        raise DomainError("softmax_jacobian: input is not on the simplex")
    return SoftmaxJacobian(s=s, j=np.diag(s) - np.outer(s, s))


def attention_isolation_probe(cfg: ModelConfig, params: ModelParams, x, task_ids,
                              key: str, eps: float = 1e-2,
                              routing: str = "learned") -> np.ndarray:
    """Max-abs change of each layer's attention probabilities when one
    adapter tensor is shifted by eps.

    Block-level modes must report exactly 0.0 for the perturbed layer itself
    (the parallel path joins after attention); component-level q/v adapters
    change the same layer's probabilities.
    """
    _, c0 = forward(cfg, params, x, task_ids, routing=routing)
    perturbed = copy.deepcopy(params)
    tmap = tensor_map(cfg, perturbed)
    if key not in tmap:
        raise ConfigError(f"attention_isolation_probe: unknown tensor {key!r}")
    tmap[key] += eps
    _, c1 = forward(cfg, perturbed, x, task_ids, routing=routing)
    return np.array([
        np.abs(c1["layers"][l]["probs"] - c0["layers"][l]["probs"]).max()
        for l in range(cfg.layers)
    ])
