"""Adapters-only checkpoints.

Layout (all integers little-endian)::

    b"D2STCKPT"  u32 format version  u64 header length  header JSON  tensor bytes

The header holds the resolved run configuration, the backbone digest and one
entry ``{name, dtype, shape, offset, nbytes}`` per tensor.  The JSON is written
with sorted keys and tensors in parameter order, so the same model and
configuration always produce the same bytes.  The frozen backbone is not
stored; it is rebuilt from its seed and checked against the digest.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ModelAssembly, backbone_digest
from .errors import SchemaError

MAGIC = b"D2STCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    tensors: dict

    @property
    def config(self) -> dict:
        return self.header["config"]


def adapter_tensors(model: ModelAssembly) -> list[tuple[str, np.ndarray]]:
    return [(name, p.data) for name, p in model.named_parameters() if name.startswith("adapters.")]


def save_checkpoint(path, model: ModelAssembly, config: dict, extra: dict | None = None) -> Path:
    entries, blobs, offset = [], [], 0
    for name, arr in adapter_tensors(model):
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": "d2st-adapters", "version": VERSION, "config": config,
              "backbone_digest": backbone_digest(model.backbone), "tensors": entries,
              "extra": extra or {}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise SchemaError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, head_len = struct.unpack_from("<IQ", blob, pos)
    if version != VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(blob[pos:pos + head_len])
    body = memoryview(blob)[pos + head_len:]
    tensors = {}
    for e in header["tensors"]:
        if e["offset"] + e["nbytes"] > len(body):
            raise SchemaError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(body[e["offset"]:e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return Checkpoint(header, tensors)


# configuration keys that change the parameter layout or the frozen host
MODEL_KEYS = ("stages", "channels", "frames", "image_size", "tokens", "backbone_seed",
              "bottleneck_ratio", "pathway_kind", "spatial_kernel", "temporal_kernel",
              "spatial_variant", "temporal_variant", "offset_range", "heads", "use_dpe",
              "spatial_path", "temporal_path", "frame_local_spatial", "residual", "policy",
              "policy_stages")


def restore(model: ModelAssembly, ckpt: Checkpoint, config: dict | None = None) -> ModelAssembly:
    """Load adapter tensors into ``model`` after checking compatibility."""
    if config is not None:
        diff = [k for k in MODEL_KEYS if ckpt.config.get(k) != config.get(k)]
        if diff:
            raise SchemaError(f"checkpoint does not match configuration in {diff}")
    if ckpt.header["backbone_digest"] != backbone_digest(model.backbone):
        raise SchemaError("checkpoint was trained on a different frozen backbone")
    params = {name: p for name, p in model.named_parameters() if name.startswith("adapters.")}
    if set(params) != set(ckpt.tensors):
        missing = sorted(set(params) ^ set(ckpt.tensors))
        raise SchemaError(f"checkpoint tensors do not match the model: {missing[:5]}")
    for name, p in params.items():
        value = ckpt.tensors[name]
        if value.shape != p.shape:
            raise SchemaError(f"{name}: checkpoint shape {value.shape} vs model {p.shape}")
        p.assign(value)
    return model
