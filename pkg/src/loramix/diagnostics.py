"""Measurement protocols: pairwise gradient-conflict sampling, per-layer
gradient correlation, and deterministic report assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParams, loss_and_grad
from .numkit import DomainError, Rng


def _flatten_b_grads(cfg: ModelConfig, grads: dict, layer: int | None = None) -> np.ndarray:
    """Concatenate up-projection gradients in deterministic key order.

    Conflict metrics look at the task-specific tensors only: the shared
    down-projection, routers, and heads are excluded.
    """
    keys = []
    for key in cfg.site_keys():
        if layer is not None and not key.startswith(f"block{layer}."):
            continue
        for i in range(cfg.n_tasks):
            keys.append(f"{key}.adapter.b{i}")
    return np.concatenate([np.asarray(grads[k]).ravel() for k in sorted(keys)])


def _cosine(a: np.ndarray, b: np.ndarray):
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na <= 1e-30 or nb <= 1e-30:
        return 0.0, True
    return float(a @ b / (na * nb)), False


def _datum_grad(cfg, params, data, task: int, index: int, routing: str) -> dict:
    x = data[task].x_train[index:index + 1]
    y = data[task].y_train[index:index + 1]
    _, grads, _ = loss_and_grad(cfg, params, x, np.array([task]), y, routing=routing)
    return grads


@dataclass
class ConflictReport:
    samples: int
    mean_cos: float
    std_cos: float
    score: float                 # mean(-cos)
    per_layer: list              # one dict per layer: mean/std of pair cosines
    attach_mode: str
    zero_grad_pairs: int

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "mean_cos": self.mean_cos,
            "std_cos": self.std_cos,
            "score": self.score,
            "per_layer": self.per_layer,
            "attach_mode": self.attach_mode,
            "zero_grad_pairs": self.zero_grad_pairs,
        }


def conflict_score(cfg: ModelConfig, params: ModelParams, data, pairs: int,
                   rng: Rng, routing: str = "learned") -> ConflictReport:
    """Sampled task-pair gradient conflict.

    Each draw picks two distinct tasks and one training datum from each,
    takes the per-datum task-loss gradient of the up-projection tensors, and
    records the cosine between the two flattened gradient vectors. The
    conflict score is the mean of the negated cosines; zero-gradient draws
    count as cosine 0 and are tallied separately.
    """
    if cfg.n_tasks < 2:
        raise DomainError("conflict_score: need at least two tasks")
    if pairs < 1:
        raise DomainError("conflict_score: pairs must be >= 1")
    for t in range(cfg.n_tasks):
        if data[t].x_train.shape[0] == 0:
            raise DomainError(f"conflict_score: task {t} has no data")
    cosines = np.empty(pairs)
    layer_cos = np.empty((pairs, cfg.layers))
    flagged = 0
    for p in range(pairs):
        a = int(rng.integers(0, cfg.n_tasks))
        b = int(rng.integers(0, cfg.n_tasks - 1))
        if b >= a:
            b += 1
        ia = int(rng.integers(0, data[a].x_train.shape[0]))
        ib = int(rng.integers(0, data[b].x_train.shape[0]))
        ga = _datum_grad(cfg, params, data, a, ia, routing)
        gb = _datum_grad(cfg, params, data, b, ib, routing)
        cos, zero = _cosine(_flatten_b_grads(cfg, ga), _flatten_b_grads(cfg, gb))
        cosines[p] = cos
        flagged += int(zero)
        for l in range(cfg.layers):
            layer_cos[p, l], _ = _cosine(_flatten_b_grads(cfg, ga, layer=l),
                                         _flatten_b_grads(cfg, gb, layer=l))
    per_layer = [{"layer": l,
                  "mean_cos": float(layer_cos[:, l].mean()),
                  "std_cos": float(layer_cos[:, l].std())}
                 for l in range(cfg.layers)]
    return ConflictReport(
        samples=pairs,
        mean_cos=float(cosines.mean()),
        std_cos=float(cosines.std()),
        score=float(-cosines.mean()),
        per_layer=per_layer,
        attach_mode=cfg.attach.value,
        zero_grad_pairs=flagged,
    )


def per_layer_correlation(cfg: ModelConfig, params: ModelParams, data,
                          samples_per_task: int, rng: Rng,
                          routing: str = "learned") -> list:
    """Mean pairwise cosine of per-task average gradients, layer by layer.

    Each task's gradient is first averaged over its sampled data, then every
    ordered task pair contributes one cosine per layer.
    """
    if cfg.n_tasks < 2:
        raise DomainError("per_layer_correlation: need at least two tasks")
    task_layer_vecs = []
    for t in range(cfg.n_tasks):
        n = data[t].x_train.shape[0]
        if n == 0:
            raise DomainError(f"per_layer_correlation: task {t} has no data")
        idx = [int(rng.integers(0, n)) for _ in range(samples_per_task)]
        acc = None
        for i in idx:
            g = _datum_grad(cfg, params, data, t, i, routing)
            vecs = [_flatten_b_grads(cfg, g, layer=l) for l in range(cfg.layers)]
            acc = vecs if acc is None else [a + v for a, v in zip(acc, vecs)]
        task_layer_vecs.append([a / samples_per_task for a in acc])
    table = []
    for l in range(cfg.layers):
        vals = []
        for i in range(cfg.n_tasks):
            for j in range(cfg.n_tasks):
                if i == j:
                    continue
                cos, _ = _cosine(task_layer_vecs[i][l], task_layer_vecs[j][l])
                vals.append(cos)
        table.append({"layer": l,
                      "mean_cos": float(np.mean(vals)),
                      "std_cos": float(np.std(vals))})
    return table


def jsonable(obj):
    """Recursively convert numpy containers to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def run_report(*, config: dict, seed: int, accuracy: dict | None = None,
               routing: dict | None = None, spectral: dict | None = None,
               conflict: dict | None = None, losses: list | None = None,
               extra: dict | None = None) -> dict:
    """Assemble the run report document. Empty sections are omitted outright
    (never emitted as null) and key order is canonicalized at serialization."""
    doc = {"report_version": 1, "config": jsonable(config), "seed": int(seed)}
    for name, section in [("accuracy", accuracy), ("routing", routing),
                          ("spectral", spectral), ("conflict", conflict),
                          ("losses", losses), ("extra", extra)]:
        if section is not None:
            doc[name] = jsonable(section)
    return doc


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_report(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_report(doc))
