"""HFMF1 checkpoint format.

Layout (all integers little-endian)::

    b"HFMF1"  u32 version
    u64 len + UTF-8 JSON config echo
    u64 len + UTF-8 JSON metrics-at-save
    u32 tensor count
    per tensor: u32 name len, name, u32 ndim, u64 dims..., float64 LE data (row-major)
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"HFMF1"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    config: dict
    metrics: dict
    version: int = VERSION


def save(path, tensors: dict[str, np.ndarray], config: dict | None = None, metrics: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for blob in (config or {}, metrics or {}):
        raw = json.dumps(blob, sort_keys=True).encode("utf-8")
        parts += [struct.pack("<Q", len(raw)), raw]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load(path) -> Checkpoint:
    path = Path(path)
    buf = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(5) != MAGIC:
        raise FormatError(f"{path}: not an HFMF1 checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    blobs = []
    for _ in range(2):
        (n,) = struct.unpack("<Q", take(8))
        blobs.append(json.loads(take(n).decode("utf-8")))
    (count,) = struct.unpack("<I", take(4))
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(tensors, blobs[0], blobs[1], version)


def save_model(path, model, metrics: dict | None = None, extra: dict | None = None) -> None:
    """Save a model's parameters with enough config to rebuild it."""
    cfg = {"kind": model.kind, "model": model.cfg.to_dict()}
    if model.kind == "m1":
        cfg["variant"] = model.variant
    elif model.kind == "m2":
        cfg["streams"] = list(model.streams)
    cfg.update(extra or {})
    save(path, model.state_dict(), cfg, metrics)


def load_model(path, m1=None, m2=None, platt=None):
    """Rebuild a model from a checkpoint; ensembles need their frozen parts."""
    from .config import ModelConfig
    from .fusion import M1Model
    from .pipeline import EnsembleModel
    from .streams import M2Model

    ck = load(path)
    kind = ck.config.get("kind")
    cfg = ModelConfig.from_dict(ck.config["model"])
    if kind == "m1":
        model = M1Model(cfg, variant=ck.config.get("variant", "full"))
    elif kind == "m2":
        model = M2Model(cfg, streams=tuple(ck.config.get("streams", ("region", "sobel", "global"))))
    elif kind == "ensemble":
        if m1 is None or m2 is None or platt is None:
            raise ValueError("loading an ensemble checkpoint needs m1, m2 and platt")
        model = EnsembleModel(m1, m2, platt, cfg)
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    model.load_state_dict(ck.tensors)
    return model, ck
