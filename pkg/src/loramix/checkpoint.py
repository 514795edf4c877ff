"""Binary checkpoint format.

Layout: magic ``MTLR``, little-endian u16 format version, u32 header length
plus canonical-JSON header (dims, expert/group counts, attach mode, seed,
epoch, optional stored metrics), u32 tensor count, then name-sorted tensor
segments: u16 name length, UTF-8 name, u32 rows, u32 cols, row-major
little-endian float32 payload. Tensors are widened back to float64 on load,
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .adapters import AttachMode
from .model import ModelConfig, ModelParams, init_params, tensor_map
from .numkit import ConfigError, Rng, ShapeError

MAGIC = b"MTLR"
FORMAT_VERSION = 1


def _canon_json(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, seed: int,
                    epoch: int, metrics: dict | None = None) -> None:
    header = {
        "d": cfg.d,
        "layers": cfg.layers,
        "heads": cfg.heads,
        "seq_len": cfg.seq_len,
        "classes": cfg.classes,
        "n_experts": cfg.n_tasks,
        "rank": cfg.rank,
        "groups": cfg.groups,
        "attach_mode": cfg.attach.value,
        "scale": cfg.scale,
        "train_a": cfg.train_a,
        "router_hidden": cfg.router_hidden,
        "seed": int(seed),
        "epoch": int(epoch),
    }
    if metrics is not None:
        header["metrics"] = metrics
    blob = _canon_json(header)
    tensors = tensor_map(cfg, params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            mat = arr if arr.ndim == 2 else arr.reshape(1, -1)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            fh.write(mat.astype("<f4").tobytes())


def round_to_f32(cfg: ModelConfig, params: ModelParams) -> None:
    """Round every trainable tensor in place to its float32 representation,
    so metrics computed now match what a checkpoint round-trip reproduces."""
    for arr in tensor_map(cfg, params).values():
        arr[...] = arr.astype("<f4").astype(np.float64)


def load_checkpoint(path):
    """Rebuild (cfg, params, header). The frozen base is regenerated from the
    stored seed; trainable tensors are overwritten from the file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack_from("<H", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format version {version}")
    hlen = struct.unpack_from("<I", blob, 6)[0]
    header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    off = 10 + hlen
    n_tensors = struct.unpack_from("<I", blob, off)[0]
    off += 4
    cfg = ModelConfig(
        n_tasks=header["n_experts"],
        d=header["d"],
        layers=header["layers"],
        heads=header["heads"],
        seq_len=header["seq_len"],
        classes=header["classes"],
        rank=header["rank"],
        groups=header["groups"],
        attach=AttachMode.parse(header["attach_mode"]),
        scale=header["scale"],
        router_hidden=header["router_hidden"],
        train_a=header["train_a"],
    )
    params = init_params(cfg, Rng(header["seed"]))
    tensors = tensor_map(cfg, params)
    for _ in range(n_tensors):
        nlen = struct.unpack_from("<H", blob, off)[0]
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        count = rows * cols
        payload = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        if name not in tensors:
            raise ConfigError(f"{path}: unknown tensor {name!r}")
        target = tensors[name]
        if target.size != count:
            raise ShapeError(f"{path}: tensor {name!r} has {count} values, "
                             f"expected {target.size}")
        target[...] = payload.astype(np.float64).reshape(target.shape)
    return cfg, params, header
