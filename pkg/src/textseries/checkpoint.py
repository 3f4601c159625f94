"""Checkpoint persistence.

One file: a single-line JSON header (format version, model config, training
step, parameter manifest with names/shapes/offsets), a newline, then the
raw little-endian float32 payload in manifest order.  Optimizer moments are
stored as extra manifest entries so training can resume.  Saving a loaded
checkpoint reproduces it byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .diffusion import GenerationModel, ModelConfig
from .numerics import OptimizerState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _manifest_arrays(model: GenerationModel,
                     opt: OptimizerState | None) -> list[tuple[str, np.ndarray]]:
    arrays = [(name, model.params[name].data) for name in sorted(model.params)]
    if opt is not None:
        for name in sorted(opt.m):
            arrays.append((f"opt.m.{name}", opt.m[name]))
        for name in sorted(opt.v):
            arrays.append((f"opt.v.{name}", opt.v[name]))
    return arrays


def save_checkpoint(path: str | Path, model: GenerationModel,
                    opt: OptimizerState | None = None) -> None:
    arrays = _manifest_arrays(model, opt)
    manifest = []
    offset = 0
    for name, arr in arrays:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "manifest": manifest,
        "optimizer": None if opt is None else {
            "lr": opt.lr, "warmup": opt.warmup, "beta1": opt.beta1,
            "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
        },
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[GenerationModel, OptimizerState | None]:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint header ({exc})")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}")
    cfg_raw = dict(header["config"])
    for key in ("conv_channels", "kernel_sizes"):
        if key in cfg_raw:
            cfg_raw[key] = tuple(cfg_raw[key])
    config = ModelConfig(**cfg_raw)
    model = GenerationModel(config)
    flat = np.frombuffer(payload, dtype="<f4")

    def read(entry) -> np.ndarray:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > flat.size:
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        return flat[start:start + size].reshape(shape).copy()

    opt = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        opt = OptimizerState(lr=o["lr"], warmup=o["warmup"], beta1=o["beta1"],
                             beta2=o["beta2"], eps=o["eps"], step=o["step"])
    for entry in header["manifest"]:
        name = entry["name"]
        arr = read(entry)
        if name.startswith("opt.m."):
            if opt is not None:
                opt.m[name[len("opt.m."):]] = arr.astype(np.float64)
        elif name.startswith("opt.v."):
            if opt is not None:
                opt.v[name[len("opt.v."):]] = arr.astype(np.float64)
        else:
            if name not in model.params:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            if arr.shape != model.params[name].data.shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name!r}: "
                    f"{arr.shape} vs {model.params[name].data.shape}")
            model.params[name].data = arr
    return model, opt
