"""Synthetic multi-task benchmark and experiment runner.

Tasks are engineered so the collapse phenomenon is reproducible at desk
scale. Class labels are parity bits over task-private coordinate planes:
a sample carries random corner signs on each plane and the label is the
product of the signs, so no linear readout of the pooled input decodes it.
A trained adapter amplifies its task's planes into the frozen FFN's tanh
saturation regime, which de-noises the signs and makes the parity linearly
readable downstream; that amplification is what static expert averaging
dilutes away as the task count grows. On top of the parity planes each
class mean carries a weak cross-task shared component, a sign-conflicting
component on a common subspace (the source of measurable gradient
conflict), and a task-identity marker that the router can key on.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import os
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import AttachMode
from .diagnostics import conflict_score, jsonable, run_report, write_report
from .model import (ModelConfig, ModelParams, forward, init_params,
                    loss_and_grad, tensor_map)
from .numkit import ConfigError, NumericError, Rng
from .routing import RoutingStats
from .spectral import build_report, reweight_projector, suppression_report


@dataclass
class TaskTemplate:
    """Shape of one synthetic task family; weights are mixture coefficients
    on unit direction vectors. ``classes`` must be a power of two: each
    class is a combination of parity bits, one per private plane."""

    classes: int = 4
    shared_weight: float = 0.15
    conflict_weight: float = 0.15
    private_weight: float = 1.0
    linear_weight: float = 0.05
    marker_weight: float = 0.6
    noise_std: float = 0.3
    train_noise_std: float | None = None  # noise augmentation; defaults to noise_std
    heterogeneity: float = 0.0  # per-task spread of signal amplitude, in [0, 1)
    signal_positions: int = 0   # 0: signal on every position; k>0: on k
                                # task-specific positions (scaled to keep the
                                # pooled magnitude unchanged)
    train_per_task: int = 512
    val_per_task: int = 128


@dataclass
class TaskSpec:
    task_id: int
    n_classes: int
    shared_dirs: np.ndarray    # (K, d) class-conditional, common to all tasks
    conflict_dirs: np.ndarray  # (K, d) common subspace carrying a per-task sign
    conflict_sign: float
    pair_dirs: np.ndarray | None  # (2, d) parity plane shared with the paired task
    private_dirs: np.ndarray   # (2*n_private_planes, d) task-private, orthogonal across tasks
    marker_dir: np.ndarray     # (d,) task identity direction
    weights: tuple             # (shared, conflict, private, linear, marker)
    noise_std: float
    train_noise_std: float
    n_train: int
    n_val: int
    seed: int

    @property
    def n_planes(self) -> int:
        pair = 0 if self.pair_dirs is None else 1
        return pair + self.private_dirs.shape[0] // 2

    def plane(self, index: int) -> np.ndarray:
        """(2, d) direction pair for one parity plane; plane 0 is the
        pair-shared one when present, the rest are task-private."""
        if self.pair_dirs is not None:
            if index == 0:
                return self.pair_dirs
            index -= 1
        return self.private_dirs[2 * index:2 * index + 2]

    def class_means(self) -> np.ndarray:
        """Expected input per class. The parity corner signs are balanced
        nuisance, so only the linear channels appear: the cross-task shared
        and sign-conflicting class directions, the task marker, and the weak
        linear offset inside each private plane."""
        k = self.n_classes
        sw, cw, _, lw, mw = self.weights
        means = np.zeros((k, self.marker_dir.shape[0]))
        for c in range(k):
            means[c] = (sw * self.shared_dirs[c]
                        + cw * self.conflict_sign * self.conflict_dirs[c]
                        + mw * self.marker_dir)
            for plane in range(self.n_planes):
                bit = 2 * ((c >> plane) & 1) - 1
                dirs = self.plane(plane)
                means[c] += lw * bit * (dirs[0] + dirs[1])
        return means

    def sample(self, n: int, seq_len: int, rng: Rng, noise_std: float | None = None):
        """n labelled sequences. Each private plane carries random corner
        signs whose product encodes one class bit (invisible to any linear
        readout) plus a weak linear offset by the same bit (degrades
        gracefully when expert updates are diluted)."""
        _, _, pw, _, _ = self.weights
        k = self.n_classes
        y = np.arange(n) % k
        base = self.class_means()[y]
        for plane in range(self.n_planes):
            bit = (y >> plane) & 1                       # 1 -> equal signs
            s1 = rng.integers(0, 2, size=n) * 2 - 1
            s2 = s1 * (2 * bit - 1)
            dirs = self.plane(plane)
            base = (base
                    + pw * s1[:, None] * dirs[0][None]
                    + pw * s2[:, None] * dirs[1][None])
        d = base.shape[1]
        sigma = self.noise_std if noise_std is None else noise_std
        x = base[:, None, :] + sigma * rng.normal((n, seq_len, d))
        return x, y


@dataclass
class TaskData:
    spec: TaskSpec
    x_train: np.ndarray  # (n, seq, d)
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


def _orthonormal_frame(d: int, m: int, rng: Rng) -> np.ndarray:
    """m orthonormal columns in R^d via modified Gram-Schmidt on seeded
    Gaussian draws (no LAPACK, so runs are reproducible everywhere)."""
    cols = np.zeros((d, m))
    got = 0
    while got < m:
        v = rng.normal(d)
        for j in range(got):
            v -= (cols[:, j] @ v) * cols[:, j]
        nrm = np.sqrt(v @ v)
        if nrm > 1e-6:
            cols[:, got] = v / nrm
            got += 1
    return cols


def direction_budget(n_tasks: int, classes: int) -> int:
    """Shared K + conflict K + parity planes + one marker per task. With two
    or more class bits, the first plane is shared within task pairs."""
    n_planes = max(1, classes.bit_length() - 1)
    if n_planes >= 2:
        pair_dims = 2 * ((n_tasks + 1) // 2)
        private_dims = 2 * (n_planes - 1) * n_tasks
    else:
        pair_dims = 0
        private_dims = 2 * n_planes * n_tasks
    return 2 * classes + pair_dims + private_dims + n_tasks


def gen_tasks(n_tasks: int, template: TaskTemplate, seed: int, d: int,
              seq_len: int) -> list[TaskData]:
    """Deterministic synthetic datasets, one per task."""
    k = template.classes
    if k < 2 or (k & (k - 1)) != 0:
        raise ConfigError(f"classes must be a power of two, got {k}")
    if direction_budget(n_tasks, k) > d:
        raise ConfigError(
            f"direction budget exceeded: {n_tasks} tasks with {k} classes need "
            f"{direction_budget(n_tasks, k)} dims, hidden dim is {d}")
    n_planes = k.bit_length() - 1
    pair_planes = n_planes >= 2
    master = Rng(seed)
    frame = _orthonormal_frame(d, direction_budget(n_tasks, k), master.child("dirs"))
    shared = frame[:, :k].T
    conflict = frame[:, k:2 * k].T
    data = []
    n_pairs = (n_tasks + 1) // 2 if pair_planes else 0
    pair_base = 2 * k
    priv_base = pair_base + 2 * n_pairs
    per_task = 2 * (n_planes - 1) if pair_planes else 2 * n_planes
    marker_base = priv_base + per_task * n_tasks
    for t in range(n_tasks):
        p0 = priv_base + per_task * t
        # deterministic per-task amplitude ramp, centred on private_weight
        if n_tasks > 1 and template.heterogeneity > 0.0:
            spread = template.heterogeneity * (2.0 * t / (n_tasks - 1) - 1.0)
        else:
            spread = 0.0
        pw_t = template.private_weight * (1.0 + spread)
        # Sign pattern +,+,-,+,-,... : the first two tasks agree, later ones
        # alternate, so the mean retained sign weight decays like 2/N while
        # any single pair of neighbours still conflicts.
        spec = TaskSpec(
            task_id=t,
            n_classes=k,
            shared_dirs=shared,
            conflict_dirs=conflict,
            conflict_sign=1.0 if (t < 2 or t % 2 == 1) else -1.0,
            pair_dirs=(frame[:, pair_base + 2 * (t // 2):
                             pair_base + 2 * (t // 2) + 2].T
                       if pair_planes else None),
            private_dirs=frame[:, p0:p0 + per_task].T,
            marker_dir=frame[:, marker_base + t],
            weights=(template.shared_weight, template.conflict_weight,
                     pw_t, template.linear_weight, template.marker_weight),
            noise_std=template.noise_std,
            train_noise_std=(template.noise_std if template.train_noise_std is None
                             else template.train_noise_std),
            n_train=template.train_per_task,
            n_val=template.val_per_task,
            seed=seed,
        )
        trng = master.child(f"task{t}")
        x_train, y_train = spec.sample(spec.n_train, seq_len, trng.child("train"),
                                       noise_std=spec.train_noise_std)
        x_val, y_val = spec.sample(spec.n_val, seq_len, trng.child("val"))
        data.append(TaskData(spec=spec, x_train=x_train, y_train=y_train,
                             x_val=x_val, y_val=y_val))
    return data


# ---------------------------------------------------------------------------
# dataset cache on disk: one binary file per task plus a JSON manifest
# ---------------------------------------------------------------------------

_TASK_HEADER = "<IIIIIIQ"  # task id, classes, d, seq, n_train, n_val, seed


def save_tasks(data: list[TaskData], meta: dict, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for td in data:
        name = f"task{td.spec.task_id:03d}.bin"
        n_train, seq, d = td.x_train.shape
        n_val = td.x_val.shape[0]
        payload = io.BytesIO()
        payload.write(struct.pack(_TASK_HEADER, td.spec.task_id, td.spec.n_classes,
                                  d, seq, n_train, n_val, td.spec.seed))
        payload.write(td.x_train.astype("<f4").tobytes())
        payload.write(td.y_train.astype("<i4").tobytes())
        payload.write(td.x_val.astype("<f4").tobytes())
        payload.write(td.y_val.astype("<i4").tobytes())
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(payload.getvalue())
        files.append(name)
    manifest = {"format_version": 1, "files": files, **jsonable(meta)}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


@dataclass
class LoadedTask:
    task_id: int
    n_classes: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


def load_tasks(data_dir: str) -> tuple[dict, list[LoadedTask]]:
    path = os.path.join(data_dir, "manifest.json")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    tasks = []
    for name in manifest["files"]:
        with open(os.path.join(data_dir, name), "rb") as fh:
            blob = fh.read()
        head = struct.unpack_from(_TASK_HEADER, blob, 0)
        task_id, k, d, seq, n_train, n_val, _seed = head
        off = struct.calcsize(_TASK_HEADER)
        def take(count, dtype):
            nonlocal off
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr
        x_train = take(n_train * seq * d, "<f4").reshape(n_train, seq, d).astype(np.float64)
        y_train = take(n_train, "<i4").astype(np.int64)
        x_val = take(n_val * seq * d, "<f4").reshape(n_val, seq, d).astype(np.float64)
        y_val = take(n_val, "<i4").astype(np.int64)
        tasks.append(LoadedTask(task_id, k, x_train, y_train, x_val, y_val))
    tasks.sort(key=lambda t: t.task_id)
    return manifest, tasks


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    router_lr_scale: float = 1.0  # router tensors train at lr * this
    lambda1: float = 0.0
    lambda2: float = 0.01
    uniform_reg: bool = False
    routing: str = "learned"


def make_projectors(cfg: ModelConfig, params: ModelParams) -> dict:
    return {key: [reweight_projector(bi) for bi in params.sites[key].experts.b]
            for key in cfg.site_keys()}


def train_model(cfg: ModelConfig, params: ModelParams, data, ts: TrainSettings,
                rng: Rng, seed_label: int = 0) -> list[dict]:
    """SGD with momentum over shuffled mixed-task batches. Reweighting
    projectors are recomputed once per epoch from the current up-projections."""
    xs = np.concatenate([td.x_train for td in data])
    ys = np.concatenate([td.y_train for td in data])
    tids = np.concatenate([np.full(td.x_train.shape[0], t, dtype=np.int64)
                           for t, td in enumerate(data)])
    n_total = xs.shape[0]
    tmap = tensor_map(cfg, params)
    velocity: dict[str, np.ndarray] = {}
    history = []
    for epoch in range(ts.epochs):
        projectors = None
        if ts.lambda1 > 0 and not ts.uniform_reg:
            projectors = make_projectors(cfg, params)
        perm = rng.child(f"epoch{epoch}").permutation(n_total)
        sums = {"task": 0.0, "spectral": 0.0, "balance": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, n_total, ts.batch_size):
            idx = perm[start:start + ts.batch_size]
            parts, grads, _ = loss_and_grad(
                cfg, params, xs[idx], tids[idx], ys[idx],
                lambda1=ts.lambda1, lambda2=ts.lambda2,
                projectors=projectors, uniform_reg=ts.uniform_reg,
                routing=ts.routing)
            if not np.isfinite(parts["total"]):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}, "
                    f"seed {seed_label}")
            for key, g in grads.items():
                v = velocity.get(key)
                if v is None:
                    v = np.zeros_like(tmap[key])
                    velocity[key] = v
                lr = ts.lr * (ts.router_lr_scale if ".router." in key else 1.0)
                v *= ts.momentum
                v -= lr * np.asarray(g)
                tmap[key] += v
            for name in sums:
                sums[name] += parts[name]
            n_batches += 1
        history.append({"epoch": epoch,
                        **{name: sums[name] / n_batches for name in sums}})
    return history


def evaluate(cfg: ModelConfig, params: ModelParams, data, routing: str = "learned",
             chunk: int = 128):
    """Validation accuracy per task plus routing statistics collected over
    every validation sample and adapter site."""
    per_task = []
    site_pis: dict[str, list] = {}
    for t, td in enumerate(data):
        n = td.x_val.shape[0]
        correct = 0
        for start in range(0, n, chunk):
            x = td.x_val[start:start + chunk]
            y = td.y_val[start:start + chunk]
            ids = np.full(x.shape[0], t, dtype=np.int64)
            logits, cache = forward(cfg, params, x, ids, routing=routing)
            correct += int((logits.argmax(axis=1) == y).sum())
            from .model import site_routing_weights
            for key, pi in site_routing_weights(cache).items():
                site_pis.setdefault(key, []).append(pi)
        per_task.append(correct / n)
    accuracy = {"per_task": per_task, "mean": float(np.mean(per_task))}
    routing_stats = None
    if site_pis:
        sites = {}
        entropies = []
        usages = []
        for key in sorted(site_pis):
            stats = RoutingStats.from_weights(np.concatenate(site_pis[key]))
            sites[key] = stats.to_dict()
            entropies.append(stats.mean_entropy())
            usages.append(stats.mean_usage)
        routing_stats = {
            "sites": sites,
            "mean_entropy": float(np.mean(entropies)),
            "mean_usage": np.mean(usages, axis=0).tolist(),
        }
    return accuracy, routing_stats


def site_svds(cfg: ModelConfig, params: ModelParams) -> dict:
    from .numkit import svd_thin
    return {key: [svd_thin(bi) for bi in params.sites[key].experts.b]
            for key in cfg.site_keys()}


# ---------------------------------------------------------------------------
# baseline compositions and grid cells
# ---------------------------------------------------------------------------

COMPOSITIONS = ("single-task-oracle", "naive-average", "uniform-routing",
                "scalar-routing", "fine-grained")


@dataclass
class CellSpec:
    n_tasks: int
    composition: str = "fine-grained"
    lambda1: float = 0.0
    lambda2: float = 0.01
    groups: int = 2
    attach: str = "block-both"
    seed: int = 0
    d: int = 32
    seq_len: int = 8
    heads: int = 2
    layers: int = 2
    rank: int = 4
    classes: int = 4
    uniform_reg: bool = False
    conflict_pairs: int = 0
    template: TaskTemplate = field(default_factory=TaskTemplate)
    train: TrainSettings = field(default_factory=TrainSettings)

    def model_config(self, n_tasks=None, groups=None) -> ModelConfig:
        return ModelConfig(
            n_tasks=self.n_tasks if n_tasks is None else n_tasks,
            d=self.d, layers=self.layers, heads=self.heads,
            seq_len=self.seq_len, classes=self.classes, rank=self.rank,
            groups=self.groups if groups is None else groups,
            attach=AttachMode.parse(self.attach), train_a=False)

    def key(self) -> str:
        return (f"N{self.n_tasks}_l1-{self.lambda1:g}_g{self.groups}_"
                f"{self.attach}_{self.composition}"
                + ("_uniformreg" if self.uniform_reg else ""))

    def to_dict(self) -> dict:
        doc = {k: v for k, v in self.__dict__.items()
               if k not in ("template", "train")}
        doc["template"] = dict(self.template.__dict__)
        doc["train"] = dict(self.train.__dict__)
        return doc


def _train_singles(spec: CellSpec, data):
    """One independently trained model per task (expert bank of size 1,
    static routing), all sharing the same frozen base and down-projections."""
    singles = []
    for t in range(spec.n_tasks):
        cfg1 = spec.model_config(n_tasks=1, groups=1)
        params = init_params(cfg1, Rng(spec.seed))
        ts = replace(spec.train, routing="uniform", lambda1=0.0, lambda2=0.0)
        train_model(cfg1, params, [data[t]], ts,
                    Rng(spec.seed).child(f"train-single{t}"), seed_label=spec.seed)
        acc, _ = evaluate(cfg1, params, [data[t]], routing="uniform")
        singles.append({"cfg": cfg1, "params": params, "accuracy": acc["mean"]})
    return singles


def merge_singles(spec: CellSpec, singles) -> tuple[ModelConfig, ModelParams]:
    """Assemble the bank of independently trained experts behind the shared
    down-projections; evaluation composes them with static uniform weights."""
    cfg = spec.model_config()
    params = init_params(cfg, Rng(spec.seed))
    for key in cfg.site_keys():
        bank = params.sites[key].experts
        for t, single in enumerate(singles):
            bank.b[t] = single["params"].sites[key].experts.b[0].copy()
    for t, single in enumerate(singles):
        params.heads[t].w = single["params"].heads[0].w.copy()
        params.heads[t].b = single["params"].heads[0].b.copy()
    return cfg, params


def compose_baseline(spec: CellSpec, trained: dict):
    """Resolve a composition tag into (cfg, params, routing_mode).

    ``trained`` carries 'singles' for merged compositions and/or 'joint'
    (cfg, params) for routed ones.
    """
    comp = spec.composition
    if comp not in COMPOSITIONS:
        raise ConfigError(f"unknown composition {comp!r}; expected one of {COMPOSITIONS}")
    if comp == "naive-average":
        cfg, params = merge_singles(spec, trained["singles"])
        return cfg, params, "uniform"
    if comp == "uniform-routing":
        cfg, params = trained["joint"]
        return cfg, params, "uniform"
    if comp in ("scalar-routing", "fine-grained"):
        cfg, params = trained["joint"]
        return cfg, params, "learned"
    raise ConfigError(f"composition {comp!r} has no merged model")


def run_cell(spec: CellSpec) -> dict:
    """Train and evaluate one grid cell; returns the report document."""
    data = gen_tasks(spec.n_tasks, spec.template, spec.seed, spec.d, spec.seq_len)
    report_sections: dict = {}
    trained: dict = {}

    needs_singles = spec.composition in ("single-task-oracle", "naive-average")
    if needs_singles:
        singles = _train_singles(spec, data)
        trained["singles"] = singles
        oracle = [s["accuracy"] for s in singles]
        report_sections["single_task_oracle"] = {
            "per_task": oracle, "mean": float(np.mean(oracle))}

    history = None
    if spec.composition in ("uniform-routing", "scalar-routing", "fine-grained"):
        groups = 1 if spec.composition == "scalar-routing" else spec.groups
        cfg = spec.model_config(groups=groups)
        params = init_params(cfg, Rng(spec.seed))
        routing = "uniform" if spec.composition == "uniform-routing" else "learned"
        ts = replace(spec.train, lambda1=spec.lambda1, lambda2=spec.lambda2,
                     uniform_reg=spec.uniform_reg, routing=routing)
        history = train_model(cfg, params, data, ts,
                              Rng(spec.seed).child("train-joint"), seed_label=spec.seed)
        trained["joint"] = (cfg, params)

    if spec.composition == "single-task-oracle":
        accuracy = dict(report_sections["single_task_oracle"])
        routing_stats = None
        eval_cfg = eval_params = None
    else:
        eval_cfg, eval_params, eval_routing = compose_baseline(spec, trained)
        accuracy, routing_stats = evaluate(eval_cfg, eval_params, data,
                                           routing=eval_routing)

    spectral = None
    if eval_params is not None:
        spectral = build_report(site_svds(eval_cfg, eval_params))

    conflict = None
    if spec.conflict_pairs > 0 and eval_params is not None and spec.n_tasks >= 2:
        routing_for_conflict = "learned" if spec.composition in (
            "scalar-routing", "fine-grained") else "uniform"
        conflict = conflict_score(
            eval_cfg, eval_params, data, spec.conflict_pairs,
            Rng(spec.seed).child("conflict"),
            routing=routing_for_conflict).to_dict()

    losses = history[-5:] if history else None
    return run_report(config=spec.to_dict(), seed=spec.seed, accuracy=accuracy,
                      routing=routing_stats, spectral=spectral, conflict=conflict,
                      losses=losses, extra=report_sections or None)


# ---------------------------------------------------------------------------
# experiment grids
# ---------------------------------------------------------------------------

@dataclass
class ExperimentGrid:
    n_tasks: list
    lambda1: list
    groups: list
    attach: list
    composition: list
    seeds: list
    reg_mode: list = field(default_factory=lambda: ["spectral"])
    base: CellSpec = field(default_factory=lambda: CellSpec(n_tasks=2))

    def __post_init__(self):
        for name in ("n_tasks", "lambda1", "groups", "attach", "composition",
                     "seeds", "reg_mode"):
            if not getattr(self, name):
                raise ConfigError(f"ExperimentGrid: empty axis {name!r}")
        deduped = list(dict.fromkeys(self.seeds))
        if len(deduped) != len(self.seeds):
            warnings.warn("ExperimentGrid: duplicate seeds removed")
            self.seeds = deduped

    def cells(self):
        for n, l1, g, attach, comp, reg in itertools.product(
                self.n_tasks, self.lambda1, self.groups, self.attach,
                self.composition, self.reg_mode):
            for seed in self.seeds:
                yield replace(self.base, n_tasks=n, lambda1=l1, groups=g,
                              attach=attach, composition=comp, seed=seed,
                              uniform_reg=(reg == "uniform"))


def _cell_job(spec: CellSpec):
    try:
        return spec.key(), spec.seed, run_cell(spec), None
    except Exception as exc:  # cell failures are recorded, the grid continues
        return spec.key(), spec.seed, None, f"{type(exc).__name__}: {exc}"


def _first(val, default=None):
    return default if val is None else val


def _suppression_deltas(rows, reports):
    """Fill per-band singular-value deltas for every run that has a matching
    lambda1 = 0 reference run (same axes and seed)."""
    ref = {}
    for row, rep in zip(rows, reports):
        if row["lambda1"] == 0 and rep is not None and "spectral" in rep:
            key = (row["n_tasks"], row["groups"], row["attach"],
                   row["composition"], row["reg_mode"], row["seed"])
            ref[key] = rep["spectral"]
    for row, rep in zip(rows, reports):
        row.setdefault("band_delta_top", "")
        row.setdefault("band_delta_mid", "")
        row.setdefault("band_delta_low", "")
        if row["lambda1"] == 0 or rep is None or "spectral" not in rep:
            continue
        key = (row["n_tasks"], row["groups"], row["attach"],
               row["composition"], row["reg_mode"], row["seed"])
        if key not in ref:
            continue
        supp = suppression_report(ref[key], rep["spectral"])
        bands = supp["bands"]
        if len(bands) == 3:
            row["band_delta_top"] = _first(bands[0]["mean_rel_change"], "")
            row["band_delta_mid"] = _first(bands[1]["mean_rel_change"], "")
            row["band_delta_low"] = _first(bands[2]["mean_rel_change"], "")


def run_grid(grid: ExperimentGrid, out_dir: str, workers: int = 1) -> dict:
    """Run every (cell, seed), write one report per run plus per-run and
    per-cell aggregate CSVs. Failures are recorded per cell and do not stop
    the grid."""
    os.makedirs(out_dir, exist_ok=True)
    specs = list(grid.cells())
    if workers > 1:
        import multiprocessing as mp
        with mp.Pool(workers) as pool:
            results = pool.map(_cell_job, specs)
    else:
        results = [_cell_job(s) for s in specs]

    rows = []
    reports = []
    failures = []
    for spec, (cell_key, seed, report, error) in zip(specs, results):
        if report is not None:
            run_dir = os.path.join(out_dir, cell_key, f"seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            write_report(report, os.path.join(run_dir, "report.json"))
        else:
            failures.append({"cell": cell_key, "seed": seed, "error": error})
        row = {
            "n_tasks": spec.n_tasks, "lambda1": spec.lambda1,
            "groups": spec.groups, "attach": spec.attach,
            "composition": spec.composition,
            "reg_mode": "uniform" if spec.uniform_reg else "spectral",
            "seed": seed,
            "mean_accuracy": report["accuracy"]["mean"] if report else "",
            "oracle_mean": (report.get("extra", {})
                            .get("single_task_oracle", {}).get("mean", "")
                            if report else ""),
            "mean_entropy": (report.get("routing") or {}).get("mean_entropy", "")
                            if report else "",
            "conflict_score": (report.get("conflict") or {}).get("score", "")
                              if report else "",
            "error": error or "",
        }
        rows.append(row)
        reports.append(report)
    _suppression_deltas(rows, reports)

    run_cols = ["n_tasks", "lambda1", "groups", "attach", "composition",
                "reg_mode", "seed", "mean_accuracy", "oracle_mean",
                "mean_entropy", "conflict_score", "band_delta_top",
                "band_delta_mid", "band_delta_low", "error"]
    with open(os.path.join(out_dir, "runs.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=run_cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in run_cols})

    # per-cell mean and std over seeds
    agg: dict[tuple, list] = {}
    for row in rows:
        if row["error"]:
            continue
        key = (row["n_tasks"], row["lambda1"], row["groups"], row["attach"],
               row["composition"], row["reg_mode"])
        agg.setdefault(key, []).append(row)
    agg_cols = ["n_tasks", "lambda1", "groups", "attach", "composition",
                "reg_mode", "n_seeds", "acc_mean", "acc_std", "oracle_mean",
                "entropy_mean", "entropy_std", "conflict_mean", "conflict_std"]

    def _stats(vals):
        vals = [v for v in vals if v != ""]
        if not vals:
            return "", ""
        return float(np.mean(vals)), float(np.std(vals))

    with open(os.path.join(out_dir, "aggregate.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=agg_cols)
        writer.writeheader()
        for key in sorted(agg, key=str):
            group = agg[key]
            acc_m, acc_s = _stats([r["mean_accuracy"] for r in group])
            ent_m, ent_s = _stats([r["mean_entropy"] for r in group])
            con_m, con_s = _stats([r["conflict_score"] for r in group])
            ora_m, _ = _stats([r["oracle_mean"] for r in group])
            writer.writerow(dict(zip(agg_cols, [*key, len(group), acc_m, acc_s,
                                                ora_m, ent_m, ent_s, con_m, con_s])))
    summary = {"cells": len(specs), "failures": failures,
               "out_dir": out_dir}
    with open(os.path.join(out_dir, "grid_summary.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(jsonable(summary), sort_keys=True, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def collapse_grid(seeds=(1, 2, 3), epochs: int = 30) -> ExperimentGrid:
    """Task-count sweep contrasting static averaging of independently trained
    experts against jointly trained fine-grained routing."""
    base = CellSpec(n_tasks=2, d=64, groups=4,
                    train=TrainSettings(epochs=epochs))
    return ExperimentGrid(
        n_tasks=[2, 4, 8, 16], lambda1=[0.0], groups=[4],
        attach=["block-both"], composition=["naive-average", "fine-grained"],
        seeds=list(seeds), base=base)


def tradeoff_grid(seeds=(1, 2, 3), epochs: int = 30) -> ExperimentGrid:
    """Regularization-strength sweep under uniform vs spectral weighting."""
    base = CellSpec(n_tasks=8, d=32, groups=2,
                    train=TrainSettings(epochs=epochs))
    return ExperimentGrid(
        n_tasks=[8], lambda1=[0.0, 0.25, 0.5, 1.0], groups=[2],
        attach=["block-both"], composition=["fine-grained"],
        seeds=list(seeds), reg_mode=["uniform", "spectral"], base=base)


def suppression_grid(seeds=(1, 2, 3), epochs: int = 30) -> ExperimentGrid:
    """Spectral-regularized vs unregularized runs for band-suppression deltas."""
    base = CellSpec(n_tasks=8, d=32, groups=2,
                    train=TrainSettings(epochs=epochs))
    return ExperimentGrid(
        n_tasks=[8], lambda1=[0.0, 0.5], groups=[2], attach=["block-both"],
        composition=["fine-grained"], seeds=list(seeds), base=base)


def conflict_grid(seeds=(1, 2, 3), epochs: int = 30, pairs: int = 250) -> ExperimentGrid:
    """Block-level vs component-level attachment, with conflict sampling."""
    base = CellSpec(n_tasks=8, d=32, groups=2, conflict_pairs=pairs,
                    train=TrainSettings(epochs=epochs))
    return ExperimentGrid(
        n_tasks=[8], lambda1=[0.0], groups=[2],
        attach=["block-both", "component-qv"], composition=["fine-grained"],
        seeds=list(seeds), base=base)


PRESETS = {
    "collapse": collapse_grid,
    "lambda-sweep": tradeoff_grid,
    "suppression": suppression_grid,
    "conflict": conflict_grid,
}
