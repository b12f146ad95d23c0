"""Checkpoint files.

Layout::

    b"VICCKPT1"
    uint64 little-endian manifest length
    manifest: UTF-8 JSON (tensor names, dtypes, shapes, configs, epoch, history)
    raw little-endian tensor payloads, in manifest order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vic.config import ModelConfig, TrainConfig, from_dict
from vic.model import VisionModel
from vic.trainer import AdamState, History

MAGIC = b"VICCKPT1"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    model_kind: str = "vic"
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    history: History = field(default_factory=History)
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: VisionModel, train_config: TrainConfig, epoch: int = 0,
                adam: AdamState | None = None, history: History | None = None, **extra) -> "Checkpoint":
        adam = adam or AdamState()
        return cls(
            params={k: v.copy() for k, v in model.state_dict().items()},
            model_config=model.config,
            train_config=train_config,
            model_kind=model.kind,
            epoch=epoch,
            adam=AdamState({k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}, adam.step),
            history=History.from_dict(history.to_dict()) if history else History(),
            extra=extra,
        )

    def build_model(self) -> VisionModel:
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        model = VisionModel(self.model_config, self.model_kind, dtype=dtype)
        model.load_state_dict(self.params)
        return model


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    out += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
    out += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, payloads = [], []
    for name, arr in _tensors(ckpt):
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "nbytes": len(raw)})
        payloads.append(raw)
    body = b"".join(payloads)
    manifest = {
        "version": FORMAT_VERSION,
        "model_kind": ckpt.model_kind,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam.step,
        "history": ckpt.history.to_dict(),
        "extra": ckpt.extra,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(body)
    os.replace(tmp, path)


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: corrupt header (truncated length field)")
    (n,) = struct.unpack("<Q", raw[8:16])
    if 16 + n > len(raw):
        raise CheckpointError(f"{path}: corrupt header (manifest runs past end of file)")
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('version')} != {FORMAT_VERSION}")
    return manifest, raw[16 + n:]


def load_checkpoint(path) -> Checkpoint:
    manifest, body = read_manifest(path)
    expected = sum(e["nbytes"] for e in manifest["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"{path}: corrupt payload ({len(body)} bytes, manifest declares {expected})")
    if hashlib.sha256(body).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupt payload (checksum mismatch)")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    offset = 0
    for e in manifest["tensors"]:
        dtype = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dtype.itemsize != e["nbytes"]:
            raise CheckpointError(f"{path}: tensor {e['name']} size disagrees with its shape {e['shape']}")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(e["shape"])
        offset += e["nbytes"]
        group, name = e["name"].split("/", 1)
        groups[group][name] = arr.astype(np.dtype(e["dtype"]))
    return Checkpoint(
        params=groups["param"],
        model_config=from_dict(ModelConfig, manifest["model_config"]),
        train_config=from_dict(TrainConfig, manifest["train_config"]),
        model_kind=manifest["model_kind"],
        epoch=manifest["epoch"],
        adam=AdamState(groups["adam_m"], groups["adam_v"], manifest["adam_step"]),
        history=History.from_dict(manifest["history"]),
        extra=manifest.get("extra", {}),
    )
