"""Command-line front end: dataset generation, training, analysis, and
experiment grids.

Exit codes: 0 success, 2 configuration/validation failure, 3 data or
checkpoint-compatibility failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import bench
from .adapters import AttachMode
from .bench import (CellSpec, ExperimentGrid, TaskTemplate, TrainSettings,
                    gen_tasks, load_tasks, run_grid, save_tasks, site_svds,
                    train_model)
from .checkpoint import load_checkpoint, round_to_f32, save_checkpoint
from .diagnostics import (conflict_score, jsonable, per_layer_correlation,
                          run_report, write_report)
from .model import (ModelConfig, attention_isolation_probe, forward,
                    init_params, softmax_jacobian)
from .numkit import ConfigError, NumericError, Rng
from .spectral import build_report, suppression_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(RuntimeError):
    """Missing or incompatible data/checkpoint inputs (exit code 3)."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

CONFIG_DEFAULTS = {
    "model": {
        "d": 32, "layers": 2, "heads": 2, "seq_len": 8, "classes": 4,
        "rank": 4, "router_hidden": None,
    },
    "experts": {"n_tasks": 4, "groups": 2, "scale": 1.0, "train_a": False},
    "attach_mode": "block-both",
    "loss": {"lambda1": 0.0, "lambda2": 0.01, "uniform_reg": False},
    "train": {"epochs": 40, "batch_size": 32, "lr": 0.05, "momentum": 0.9,
              "routing": "learned"},
    "data": {
        "shared_weight": 0.15, "conflict_weight": 0.15, "private_weight": 1.0,
        "linear_weight": 0.05, "marker_weight": 0.6, "noise_std": 0.3,
        "train_noise_std": None, "train_per_task": 512, "val_per_task": 128,
    },
    "seed": 0,
}

_NUMERIC_BOUNDS = {
    ("model", "d"): (2, 4096),
    ("model", "layers"): (1, 16),
    ("model", "heads"): (1, 64),
    ("model", "seq_len"): (1, 512),
    ("model", "classes"): (2, 256),
    ("model", "rank"): (1, 512),
    ("experts", "n_tasks"): (1, 1024),
    ("experts", "groups"): (1, 4096),
    ("train", "epochs"): (0, 100000),
    ("train", "batch_size"): (1, 65536),
    ("data", "train_per_task"): (1, 10**7),
    ("data", "val_per_task"): (1, 10**7),
}


def _merge_section(defaults, given, path):
    if not isinstance(given, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    out = dict(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + '.' + key!r}")
        if isinstance(defaults[key], dict):
            out[key] = _merge_section(defaults[key], val, path + "." + key)
        else:
            out[key] = val
    return out


def validate_config(doc: dict) -> dict:
    """Fill defaults, reject unknown keys, and enforce value constraints."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    conf = dict(CONFIG_DEFAULTS)
    for key, val in doc.items():
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(CONFIG_DEFAULTS[key], dict):
            conf[key] = _merge_section(CONFIG_DEFAULTS[key], val, key)
        else:
            conf[key] = val
    for (section, key), (lo, hi) in _NUMERIC_BOUNDS.items():
        val = conf[section][key]
        if not isinstance(val, int) or not lo <= val <= hi:
            raise ConfigError(f"{section}.{key} must be an integer in [{lo}, {hi}]")
    for section, key in [("loss", "lambda1"), ("loss", "lambda2"),
                         ("experts", "scale"), ("train", "lr"),
                         ("train", "momentum")]:
        val = conf[section][key]
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ConfigError(f"{section}.{key} must be a number")
    if conf["loss"]["lambda1"] < 0 or conf["loss"]["lambda2"] < 0:
        raise ConfigError("loss weights must be nonnegative")
    AttachMode.parse(conf["attach_mode"])
    if conf["train"]["routing"] not in ("learned", "uniform"):
        raise ConfigError("train.routing must be 'learned' or 'uniform'")
    model = conf["model"]
    if model["d"] % model["heads"] != 0:
        raise ConfigError("model.d must be divisible by model.heads")
    if model["d"] % conf["experts"]["groups"] != 0:
        raise ConfigError("experts.groups must divide model.d")
    if not isinstance(conf["seed"], int) or conf["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return conf


def load_config(path: str | None, overrides: argparse.Namespace) -> dict:
    doc = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if getattr(overrides, "seed", None) is not None:
        doc["seed"] = overrides.seed
    if getattr(overrides, "lambda1", None) is not None:
        doc.setdefault("loss", {})["lambda1"] = overrides.lambda1
    if getattr(overrides, "lambda2", None) is not None:
        doc.setdefault("loss", {})["lambda2"] = overrides.lambda2
    if getattr(overrides, "uniform_reg", False):
        doc.setdefault("loss", {})["uniform_reg"] = True
    if getattr(overrides, "groups", None) is not None:
        doc.setdefault("experts", {})["groups"] = overrides.groups
    if getattr(overrides, "attach", None) is not None:
        doc["attach_mode"] = overrides.attach
    return validate_config(doc)


def model_config_from(conf: dict) -> ModelConfig:
    model, experts = conf["model"], conf["experts"]
    return ModelConfig(
        n_tasks=experts["n_tasks"], d=model["d"], layers=model["layers"],
        heads=model["heads"], seq_len=model["seq_len"], classes=model["classes"],
        rank=model["rank"], groups=experts["groups"],
        attach=AttachMode.parse(conf["attach_mode"]), scale=experts["scale"],
        router_hidden=model["router_hidden"], train_a=experts["train_a"])


def template_from(conf: dict) -> TaskTemplate:
    data = conf["data"]
    return TaskTemplate(classes=conf["model"]["classes"], **{
        k: data[k] for k in ("shared_weight", "conflict_weight", "private_weight",
                             "linear_weight", "marker_weight", "noise_std",
                             "train_noise_std", "train_per_task", "val_per_task")})


def train_settings_from(conf: dict) -> TrainSettings:
    train, loss = conf["train"], conf["loss"]
    return TrainSettings(
        epochs=train["epochs"], batch_size=train["batch_size"], lr=train["lr"],
        momentum=train["momentum"], lambda1=loss["lambda1"],
        lambda2=loss["lambda2"], uniform_reg=loss["uniform_reg"],
        routing=train["routing"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    conf = load_config(args.config, args)
    data = gen_tasks(conf["experts"]["n_tasks"], template_from(conf),
                     conf["seed"], conf["model"]["d"], conf["model"]["seq_len"])
    os.makedirs(args.out, exist_ok=True)
    manifest = save_tasks(data, {"config": conf, "seed": conf["seed"]}, args.out)
    print(f"wrote {len(manifest['files'])} task files + manifest to {args.out}")
    return EXIT_OK


def _load_data_dir(path: str):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"no manifest.json under {path}")
    return load_tasks(path)


def _check_data_compat(conf: dict, tasks) -> None:
    model = conf["model"]
    n, seq, d = tasks[0].x_train.shape[0], tasks[0].x_train.shape[1], tasks[0].x_train.shape[2]
    if d != model["d"] or seq != model["seq_len"]:
        raise DataError(f"data dims (seq={seq}, d={d}) do not match model "
                        f"(seq={model['seq_len']}, d={model['d']})")
    if len(tasks) != conf["experts"]["n_tasks"]:
        raise DataError(f"data has {len(tasks)} tasks, config expects "
                        f"{conf['experts']['n_tasks']}")
    if any(t.n_classes != model["classes"] for t in tasks):
        raise DataError("data class count does not match model.classes")


def _evaluate_full(cfg, params, tasks, routing):
    accuracy, routing_stats = bench.evaluate(cfg, params, tasks, routing=routing)
    spectral = build_report(site_svds(cfg, params))
    return accuracy, routing_stats, spectral


def cmd_train(args) -> int:
    conf = load_config(args.config, args)
    manifest, tasks = _load_data_dir(args.data)
    _check_data_compat(conf, tasks)
    os.makedirs(args.out, exist_ok=True)
    seed = conf["seed"]
    epochs_override = args.epochs

    if args.resume:
        cfg, params, header = load_checkpoint(args.resume)
        start_epoch = header["epoch"]
        stored_metrics = header.get("metrics")
        expected = model_config_from(conf)
        if (cfg.d, cfg.seq_len, cfg.n_tasks, cfg.classes) != (
                expected.d, expected.seq_len, expected.n_tasks, expected.classes):
            raise DataError("checkpoint dimensions do not match config")
    else:
        cfg = model_config_from(conf)
        params = init_params(cfg, Rng(seed))
        start_epoch = 0
        stored_metrics = None

    ts = train_settings_from(conf)
    if epochs_override is not None:
        ts = TrainSettings(**{**ts.__dict__, "epochs": epochs_override})

    history = []
    if ts.epochs > 0:
        history = train_model(cfg, params, tasks, ts,
                              Rng(seed).child(f"train-from{start_epoch}"),
                              seed_label=seed)
        for row in history:
            print("epoch {epoch}: task {task:.4f} spectral {spectral:.4f} "
                  "balance {balance:.4f} total {total:.4f}".format(**row))
        round_to_f32(cfg, params)
        routing = ts.routing
        accuracy, routing_stats, spectral = _evaluate_full(cfg, params, tasks, routing)
    elif stored_metrics is not None:
        accuracy = stored_metrics.get("accuracy")
        routing_stats = stored_metrics.get("routing")
        spectral = stored_metrics.get("spectral")
    else:
        round_to_f32(cfg, params)
        accuracy, routing_stats, spectral = _evaluate_full(cfg, params, tasks,
                                                           ts.routing)

    epoch_now = start_epoch + ts.epochs
    metrics = {"accuracy": accuracy, "routing": routing_stats, "spectral": spectral}
    ck_path = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(ck_path, cfg, params, seed, epoch_now, metrics=jsonable(metrics))
    report = run_report(config=conf, seed=seed, accuracy=accuracy,
                        routing=routing_stats, spectral=spectral,
                        losses=history or None)
    write_report(report, os.path.join(args.out, "report.json"))
    print(f"checkpoint: {ck_path}")
    print(f"mean accuracy: {accuracy['mean']:.4f}")
    return EXIT_OK


def _tasks_as_data(tasks):
    return tasks  # LoadedTask already exposes x_train/y_train/x_val/y_val


def cmd_analyze(args) -> int:
    if not args.ckpt:
        raise ConfigError("analyze: at least one checkpoint required")
    loaded = [load_checkpoint(p) for p in args.ckpt]
    cfg, params, header = loaded[0]
    for other_cfg, _, _ in loaded[1:]:
        if (other_cfg.d, other_cfg.n_tasks, other_cfg.rank) != (cfg.d, cfg.n_tasks, cfg.rank):
            raise DataError("analyze: checkpoints have incompatible dimensions")
    os.makedirs(args.out, exist_ok=True)
    seed = args.seed if args.seed is not None else header["seed"]
    sections: dict = {}

    if args.spectral or args.suppression:
        sections["spectral"] = build_report(site_svds(cfg, params))
    if args.suppression:
        if len(loaded) != 2:
            raise ConfigError("--suppression requires exactly two checkpoints "
                              "(reference first, comparison second)")
        ref_cfg, ref_params, _ = loaded[0]
        new_cfg, new_params, _ = loaded[1]
        sections["suppression"] = suppression_report(
            build_report(site_svds(ref_cfg, ref_params)),
            build_report(site_svds(new_cfg, new_params)))

    tasks = None
    if args.routing or args.conflict:
        if not args.data:
            raise DataError("analyze: --routing/--conflict need --data")
        _, tasks = _load_data_dir(args.data)
        if len(tasks) < cfg.n_tasks:
            raise DataError("analyze: data has fewer tasks than the checkpoint")
        tasks = tasks[:cfg.n_tasks]
    if args.routing:
        accuracy, routing_stats = bench.evaluate(cfg, params, tasks, routing="learned")
        sections["routing"] = routing_stats
        sections["accuracy"] = accuracy
    if args.conflict:
        rep = conflict_score(cfg, params, _tasks_as_data(tasks), args.pairs,
                             Rng(seed).child("conflict"))
        sections["conflict"] = rep.to_dict()
        sections["conflict_per_layer"] = per_layer_correlation(
            cfg, params, _tasks_as_data(tasks), args.samples_per_task,
            Rng(seed).child("per-layer"))
    if args.jacobian:
        sections["jacobian"] = _jacobian_section(cfg, params, seed)

    if not sections:
        raise ConfigError("analyze: no analysis flags given")
    report = run_report(config=jsonable(header), seed=seed,
                        extra={"analysis": jsonable(sections)})
    out_path = os.path.join(args.out, "analysis.json")
    write_report(report, out_path)
    print(f"wrote {out_path}")
    return EXIT_OK


def _jacobian_section(cfg, params, seed) -> dict:
    """Structure checks on attention probability rows plus the adapter
    isolation probe for this checkpoint's attach mode."""
    rng = Rng(seed).child("jacobian")
    x = rng.normal((4, cfg.seq_len, cfg.d))
    task_ids = np.zeros(4, dtype=np.int64)
    _, cache = forward(cfg, params, x, task_ids)
    worst_rowsum = 0.0
    worst_sym = 0.0
    for lc in cache["layers"]:
        probs = lc["probs"].reshape(-1, cfg.seq_len)
        for row in probs[:8]:
            jac = softmax_jacobian(row)
            worst_rowsum = max(worst_rowsum, float(np.abs(jac.j.sum(axis=1)).max()))
            worst_sym = max(worst_sym, float(np.abs(jac.j - jac.j.T).max()))
    site = cfg.site_keys()[0]
    deltas = attention_isolation_probe(cfg, params, x, task_ids,
                                       f"{site}.adapter.b0", eps=1e-2)
    return {
        "max_row_sum": worst_rowsum,
        "max_asymmetry": worst_sym,
        "probe_site": site,
        "probe_attention_delta_per_layer": deltas.tolist(),
    }


def _grid_from_file(path: str) -> ExperimentGrid:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"grid config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid config {path} is not valid JSON: {exc}") from exc
    axes = doc.get("axes", {})
    base_doc = doc.get("base", {})
    template = TaskTemplate(**base_doc.get("template", {}))
    train = TrainSettings(**base_doc.get("train", {}))
    cell_kwargs = {k: v for k, v in base_doc.items() if k not in ("template", "train")}
    base = CellSpec(n_tasks=2, template=template, train=train, **cell_kwargs)
    return ExperimentGrid(
        n_tasks=axes.get("n_tasks", [base.n_tasks]),
        lambda1=axes.get("lambda1", [base.lambda1]),
        groups=axes.get("groups", [base.groups]),
        attach=axes.get("attach", [base.attach]),
        composition=axes.get("composition", [base.composition]),
        reg_mode=axes.get("reg_mode", ["spectral"]),
        seeds=doc.get("seeds", [0]),
        base=base,
    )


def cmd_grid(args) -> int:
    workers = args.workers
    env_cap = os.environ.get("MTLORA_THREADS")
    if env_cap is not None:
        workers = min(workers, max(1, int(env_cap)))
    if args.preset:
        if args.preset not in bench.PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; "
                              f"available: {sorted(bench.PRESETS)}")
        grids = bench.PRESETS[args.preset](seeds=tuple(args.seeds))
    elif args.grid_config:
        grids = _grid_from_file(args.grid_config)
    else:
        raise ConfigError("grid: either --preset or --grid-config is required")
    if not isinstance(grids, list):
        grids = [grids]
    total_cells = 0
    failures = []
    for i, grid in enumerate(grids):
        sub = args.out if len(grids) == 1 else os.path.join(args.out, f"part{i}")
        summary = run_grid(grid, sub, workers=workers)
        total_cells += summary["cells"]
        failures.extend(summary["failures"])
    print(f"grid finished: {total_cells} runs, {len(failures)} failed")
    for fail in failures:
        print(f"  FAILED {fail['cell']} seed {fail['seed']}: {fail['error']}")
    return EXIT_DATA if failures and len(failures) == total_cells else EXIT_OK


def cmd_export_csv(args) -> int:
    import csv
    reports = []
    for path in args.report:
        try:
            with open(path, encoding="utf-8") as fh:
                reports.append(json.load(fh))
        except FileNotFoundError as exc:
            raise DataError(f"report not found: {path}") from exc
    os.makedirs(args.out, exist_ok=True)
    written = []

    def _spectral_rows(rep):
        spectral = rep.get("spectral") or rep.get("extra", {}).get(
            "analysis", {}).get("spectral")
        if not spectral:
            return None
        rows = []
        for site in sorted(spectral["sites"]):
            for expert, sigmas in enumerate(spectral["sites"][site]["sigmas"]):
                for k, sigma in enumerate(sigmas):
                    rows.append({"site": site, "expert": expert, "k": k,
                                 "sigma": sigma})
        return rows

    first = _spectral_rows(reports[0])
    if first is not None and len(reports) == 1:
        path = os.path.join(args.out, "spectral.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["site", "expert", "k", "sigma"])
            writer.writeheader()
            writer.writerows(first)
        written.append(path)
    if len(reports) == 2:
        second = _spectral_rows(reports[1])
        if first is None or second is None:
            raise DataError("export-csv: both reports need spectral sections")
        path = os.path.join(args.out, "spectral_delta.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["site", "expert", "k", "sigma_before", "sigma_after"])
            writer.writeheader()
            for row_b, row_a in zip(first, second):
                writer.writerow({"site": row_b["site"], "expert": row_b["expert"],
                                 "k": row_b["k"], "sigma_before": row_b["sigma"],
                                 "sigma_after": row_a["sigma"]})
        written.append(path)
    conflict = reports[0].get("conflict") or reports[0].get("extra", {}).get(
        "analysis", {}).get("conflict")
    if conflict and conflict.get("per_layer"):
        path = os.path.join(args.out, "conflict_layers.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["layer", "mode", "mean_cos", "std"])
            writer.writeheader()
            for row in conflict["per_layer"]:
                writer.writerow({"layer": row["layer"],
                                 "mode": conflict.get("attach_mode", ""),
                                 "mean_cos": row["mean_cos"],
                                 "std": row["std_cos"]})
        written.append(path)
    if not written:
        raise ConfigError("export-csv: nothing exportable in the given reports")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loramix",
        description="Multi-task low-rank adapter bank with grouped routing, "
                    "spectral regularization, and conflict diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run-config JSON path")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate synthetic task datasets")
    common(p)
    p.add_argument("--lambda1", type=float, help=argparse.SUPPRESS)
    p.add_argument("--lambda2", type=float, help=argparse.SUPPRESS)
    p.add_argument("--groups", type=int, help="override expert group count")
    p.add_argument("--attach", choices=[m.value for m in AttachMode])
    p.set_defaults(func=cmd_gen_data, uniform_reg=False)

    p = sub.add_parser("train", help="train adapters, router, and heads")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--lambda1", type=float, help="spectral loss weight")
    p.add_argument("--lambda2", type=float, help="balance loss weight")
    p.add_argument("--groups", type=int, help="override expert group count")
    p.add_argument("--attach", choices=[m.value for m in AttachMode])
    p.add_argument("--uniform-reg", action="store_true", dest="uniform_reg",
                   help="penalize raw up-projections (no spectral weighting)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="run diagnostics on checkpoints")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--data", help="dataset directory (routing/conflict)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--samples-per-task", type=int, default=30)
    p.add_argument("--spectral", action="store_true")
    p.add_argument("--conflict", action="store_true")
    p.add_argument("--routing", action="store_true")
    p.add_argument("--suppression", action="store_true")
    p.add_argument("--jacobian", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("grid", help="run an experiment grid")
    p.add_argument("--grid-config", help="grid JSON path")
    p.add_argument("--preset", help=f"one of {sorted(bench.PRESETS)}")
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1,
                   help="parallel cell workers (MTLORA_THREADS caps this)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("export-csv", help="flatten report JSON into CSV")
    p.add_argument("--report", nargs="+", required=True,
                   help="one report, or two for before/after deltas")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_csv)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error (numeric): {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
