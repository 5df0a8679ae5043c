"""Checkpoint directory format.

A checkpoint is a directory holding ``meta.json`` plus ``blobs.bin``.  All
float32 tensors (parameters, buffers, optimizer moments) are concatenated into
the blob file as raw little-endian bytes, with name/shape/offset listed in the
meta manifest; integer tensors, rng states, the vocabulary, the identity map,
and the full config snapshot live in the JSON.  Round-tripping is bitwise:
float bytes are written and read untouched.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError

FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    config: dict
    config_hash: str
    stage: int
    epoch: int
    global_step: int
    tensors: dict[str, Tensor]
    optimizer: dict | None
    rng: dict
    vocab: dict[str, int]
    id_map: dict
    metric_history: list[dict]


def _torch_rng_to_str(state: Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def torch_rng_from_str(blob: str) -> Tensor:
    raw = base64.b64decode(blob.encode("ascii"))
    return torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy())


def save_checkpoint(path: str | Path, *, config: dict, config_hash: str, stage: int,
                    epoch: int, global_step: int, tensors: dict[str, Tensor],
                    optimizer: dict | None, sampler_rng_state: dict,
                    vocab: dict[str, int], id_map: dict,
                    metric_history: list[dict]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    int_tensors = {}
    offset = 0
    float_items = []
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        if t.dtype == torch.float32:
            numel = t.numel()
            manifest.append({"name": name, "shape": list(t.shape), "offset": offset,
                             "numel": numel})
            float_items.append(t)
            offset += numel * 4
        elif not t.is_floating_point():
            int_tensors[name] = {"dtype": str(t.dtype).removeprefix("torch."),
                                 "shape": list(t.shape),
                                 "values": t.reshape(-1).tolist()}
        else:
            raise ConfigError(f"tensor {name} has unsupported checkpoint dtype {t.dtype}")
    with open(path / "blobs.bin", "wb") as fh:
        for t in float_items:
            arr = t.contiguous().numpy()
            if arr.dtype.byteorder == ">":  # blobs are little-endian on every platform
                arr = arr.astype("<f4")
            fh.write(arr.tobytes())
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "config_hash": config_hash,
        "stage": stage,
        "epoch": epoch,
        "global_step": global_step,
        "blobs": manifest,
        "int_tensors": int_tensors,
        "optimizer": optimizer,
        "rng": {
            "torch": _torch_rng_to_str(torch.get_rng_state()),
            "sampler": sampler_rng_state,
        },
        "vocab": vocab,
        "id_map": id_map,
        "metric_history": metric_history,
    }
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path: str | Path, *, expect_config_hash: str | None = None,
                    allow_mismatch: bool = False) -> CheckpointData:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"no checkpoint at {path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"checkpoint {path} has format_version "
                          f"{meta.get('format_version')}, expected {FORMAT_VERSION}")
    if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
        if not allow_mismatch:
            raise ConfigError(
                f"checkpoint {path} was written under config {meta['config_hash']}, "
                f"current config is {expect_config_hash}; pass the override to load anyway"
            )
    raw = (path / "blobs.bin").read_bytes()
    tensors: dict[str, Tensor] = {}
    for item in meta["blobs"]:
        start = item["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=item["numel"], offset=start)
        tensors[item["name"]] = torch.from_numpy(arr.copy()).reshape(item["shape"])
    for name, spec in meta["int_tensors"].items():
        dtype = getattr(torch, spec["dtype"])
        tensors[name] = torch.tensor(spec["values"], dtype=dtype).reshape(spec["shape"])
    return CheckpointData(
        config=meta["config"],
        config_hash=meta["config_hash"],
        stage=meta["stage"],
        epoch=meta["epoch"],
        global_step=meta["global_step"],
        tensors=tensors,
        optimizer=meta["optimizer"],
        rng=meta["rng"],
        vocab=meta["vocab"],
        id_map=meta["id_map"],
        metric_history=meta["metric_history"],
    )
