"""Versioned binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 manifest length, UTF-8 JSON
manifest, then raw little-endian blobs at the offsets listed in the manifest.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import torch

from .errors import CheckpointError, ConfigError
from .model import HeadSpec, Model, ModelConfig

MAGIC = b"JPTCKPT\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPES = {"f64": np.dtype("<f8"), "i64": np.dtype("<i8"), "u8": np.dtype("u1")}


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


@dataclass
class Checkpoint:
    manifest: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.manifest["model_config"])

    def head_specs(self):
        return [HeadSpec(**h) for h in self.manifest["heads"]]

    def build_model(self, params_prefix: str = "param/") -> Model:
        model = Model(self.model_config(), self.head_specs(), seed=0)
        load_params(model, self.tensors, params_prefix)
        return model


def load_params(model: Model, tensors: Dict[str, np.ndarray], prefix: str = "param/", backbone_only: bool = False):
    with torch.no_grad():
        for name, p in model.named_parameters():
            if backbone_only and name.startswith("heads."):
                continue
            key = prefix + name
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigError(f"parameter {name!r}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.array(arr, dtype=np.float64)))


def param_arrays(named, prefix: str) -> Dict[str, np.ndarray]:
    return {prefix + k: v.detach().numpy().astype("<f8", copy=True) for k, v in named}


def to_bytes(ckpt: Checkpoint) -> bytes:
    blobs = io.BytesIO()
    entries = []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        tag = _dtype_tag(arr)
        data = arr.astype(_DTYPES[tag], copy=False).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": blobs.tell(), "nbytes": len(data)})
        blobs.write(data)
    payload = blobs.getvalue()
    manifest = dict(ckpt.manifest)
    manifest["tensors"] = entries
    manifest["blob_sha256"] = hashlib.sha256(payload).hexdigest()
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(head)) + head + payload


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated: header incomplete")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise CheckpointError("checkpoint truncated: manifest incomplete")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    payload = data[start + mlen :]
    entries = manifest.pop("tensors", [])
    expected = sum(e["nbytes"] for e in entries)
    if len(payload) != expected:
        raise CheckpointError(f"checkpoint truncated: {len(payload)} of {expected} blob bytes")
    if hashlib.sha256(payload).hexdigest() != manifest.pop("blob_sha256", None):
        raise CheckpointError("checkpoint blob checksum mismatch")
    tensors = {}
    for e in entries:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return Checkpoint(manifest, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temporary file, then rename)."""
    data = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data)
