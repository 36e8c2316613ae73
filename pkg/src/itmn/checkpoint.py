"""Checkpoint container: magic, JSON header, raw little-endian tensor payloads.

Layout::

    8 bytes   magic  b"ITMNCKPT"
    8 bytes   header length in bytes, unsigned little-endian
    n bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       tensor payloads, back to back, in header order

The header records, per tensor, its name, dtype, shape, byte offset (relative
to the start of the payload region) and byte length; the offsets tile the
payload exactly.  Serialization is canonical, so loading and re-saving a file
reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ITMNCKPT"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int8": "|i1", "int32": "<i4", "int64": "<i8", "uint8": "|u1"}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> ndarray, insertion order is file order

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            key = arr.dtype.name
            if key not in _DTYPES:
                raise CheckpointError(f"tensor {name!r}: unsupported dtype {key}")
            raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
            entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = {"format_version": FORMAT_VERSION, "meta": self.meta, "tensors": entries}
        blob = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        if len(data) < 16 or data[:8] != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (bad magic at byte offset 0)")
        (hlen,) = struct.unpack("<Q", data[8:16])
        if 16 + hlen > len(data):
            raise CheckpointError(f"{source}: header length {hlen} runs past end of file")
        try:
            header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{source}: malformed JSON header") from e
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{source}: unsupported format version {header.get('format_version')}")
        base, expected, tensors = 16 + hlen, 0, {}
        for e in header["tensors"]:
            if e["offset"] != expected:
                raise CheckpointError(f"{source}: tensor {e['name']!r} offset {e['offset']} does not tile the payload")
            dtype = np.dtype(_DTYPES[e["dtype"]])
            count = int(np.prod(e["shape"], dtype=np.int64))
            if count * dtype.itemsize != e["length"]:
                raise CheckpointError(f"{source}: tensor {e['name']!r} length disagrees with its shape")
            start = base + e["offset"]
            if start + e["length"] > len(data):
                raise CheckpointError(f"{source}: tensor {e['name']!r} runs past end of file")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=start).reshape(e["shape"])
            tensors[e["name"]] = arr.astype(np.dtype(e["dtype"]), copy=True)
            expected += e["length"]
        if base + expected != len(data):
            raise CheckpointError(f"{source}: {len(data) - base - expected} trailing bytes after the payload")
        return cls(header["meta"], tensors)

    def payload_bytes(self, prefix: str = "") -> int:
        return sum(np.asarray(a).nbytes for k, a in self.tensors.items() if k.startswith(prefix))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return Checkpoint.from_bytes(path.read_bytes(), source=path.name)


# ---------------------------------------------------------------------------
# model <-> checkpoint
# ---------------------------------------------------------------------------


def model_tensors(model) -> dict:
    """Parameters under ``params/`` and BN running statistics under ``state/``."""
    out = {f"params/{name}": t.data for name, t in model.named_parameters()}
    out.update({f"state/{name}": b for name, b in model.named_buffers()})
    return out


def load_model_tensors(model, tensors: dict):
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, t in params.items():
        key = f"params/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if tensors[key].shape != t.shape:
            raise CheckpointError(f"parameter {name!r}: checkpoint shape {tensors[key].shape} != model shape {t.shape}")
        t.data = np.array(tensors[key], dtype=t.dtype)
    for name, b in buffers.items():
        key = f"state/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks buffer {name!r}")
        b[...] = tensors[key]
    known = {f"params/{n}" for n in params} | {f"state/{n}" for n in buffers}
    extra = [k for k in tensors if k.split("/", 1)[0] in ("params", "state") and k not in known]
    if extra:
        raise CheckpointError(f"architecture mismatch: checkpoint has unknown tensors {extra[:3]}")


def model_checkpoint(model, extra_meta: dict | None = None, extra_tensors: dict | None = None) -> Checkpoint:
    meta = {"kind": "float", "model": model.config.to_dict(), "seed": model.seed}
    meta.update(extra_meta or {})
    tensors = model_tensors(model)
    tensors.update(extra_tensors or {})
    return Checkpoint(meta, {k: np.array(v) for k, v in tensors.items()})


def model_from_checkpoint(ckpt: Checkpoint):
    from .fusion import Detector, ModelConfig

    if ckpt.meta.get("kind") != "float":
        raise CheckpointError(f"expected a float checkpoint, got kind {ckpt.meta.get('kind')!r}")
    model = Detector(ModelConfig.from_dict(ckpt.meta["model"]), seed=int(ckpt.meta["seed"]))
    load_model_tensors(model, ckpt.tensors)
    return model
