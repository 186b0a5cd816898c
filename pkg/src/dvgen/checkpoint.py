"""Binary checkpoint: magic, version, JSON header, float64 payload.

Layout on disk::

    8 bytes   magic  b"DVGCKPT\\x00"
    4 bytes   format version, little-endian uint32
    8 bytes   header length in bytes, little-endian uint64
    header    UTF-8 JSON: config snapshot, layout manifest, training progress
    payload   little-endian float64 values, in layout order

The layout manifest names every slice of the payload, so the parameters can
be read without the package.  Loading a different version is an error.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dvg import DvgModel
from .errors import CheckpointError
from .numerics import DTYPE, AdamState, ParamLayout, load_module_vector, module_vector
from .runconfig import RunConfig
from .synthdata import _atomic_write_bytes

MAGIC = b"DVGCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    config: RunConfig
    params: torch.Tensor
    layout: ParamLayout
    adam: AdamState | None = None
    epochs_done: int = 0
    extra: dict = field(default_factory=dict)

    def build_model(self) -> DvgModel:
        model = DvgModel(self.config.model())
        if ParamLayout.from_module(model).to_manifest() != self.layout.to_manifest():
            raise CheckpointError("checkpoint layout does not match the configured model")
        load_module_vector(model, self.params)
        return model


def from_model(model: DvgModel, config: RunConfig, adam: AdamState | None = None,
               epochs_done: int = 0) -> Checkpoint:
    return Checkpoint(config, module_vector(model).detach().clone(), ParamLayout.from_module(model),
                      adam, epochs_done)


def to_bytes(ckpt: Checkpoint) -> bytes:
    n = ckpt.layout.size
    header = {
        "config": ckpt.config.to_dict(),
        "layout": ckpt.layout.to_manifest(),
        "epochs_done": int(ckpt.epochs_done),
        "adam_step": int(ckpt.adam.t) if ckpt.adam is not None else None,
        "blocks": ["params"] + (["adam_m", "adam_v"] if ckpt.adam is not None else []),
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [ckpt.params]
    if ckpt.adam is not None:
        parts += [ckpt.adam.m, ckpt.adam.v]
    for p in parts:
        if p.numel() != n:
            raise CheckpointError(f"block of {p.numel()} values, layout expects {n}")
    payload = np.concatenate([p.detach().numpy().astype("<f8", copy=False) for p in parts]).tobytes()
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    layout = ParamLayout.from_manifest(header["layout"])
    blocks = header["blocks"]
    body = raw[start + hlen:]
    if len(body) != 8 * layout.size * len(blocks):
        raise CheckpointError(f"payload has {len(body)} bytes, expected {8 * layout.size * len(blocks)}")
    values = np.frombuffer(body, dtype="<f8").reshape(len(blocks), layout.size)
    tensors = {name: torch.from_numpy(values[i].astype(np.float64)) for i, name in enumerate(blocks)}
    adam = None
    if "adam_m" in tensors:
        adam = AdamState(tensors["adam_m"], tensors["adam_v"], int(header["adam_step"]))
    return Checkpoint(RunConfig.from_dict(header["config"]), tensors["params"].to(DTYPE), layout, adam,
                      int(header["epochs_done"]), header.get("extra", {}))


def save(ckpt: Checkpoint, path) -> None:
    _atomic_write_bytes(path, to_bytes(ckpt))


def load(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(raw)
