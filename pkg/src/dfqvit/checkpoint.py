"""Named-tensor container format shared by checkpoints, samples and ACM files.

Layout (little-endian)::

    b"DFQV"  u32 version=1  u32 count
    count x { u32 name_len, utf-8 name, u32 rank, u64 dims[rank], f64 data[prod(dims)] }

Model checkpoints add a ``meta.config`` vector holding the architecture so a
file can be loaded without knowing the config up front.
"""

from __future__ import annotations

import os
import struct
from typing import Dict, Mapping, Optional

import numpy as np

from .model import ViTConfig, ViTModel, parameter_shapes
from .tensor import Tensor

MAGIC = b"DFQV"
VERSION = 1
_CONFIG_KEY = "meta.config"
_CONFIG_FIELDS = ("image_size", "patch_size", "hidden_dim", "num_layers",
                  "num_heads", "mlp_ratio", "num_classes", "use_cls_token")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    magic = r.take(4, "magic") if len(buf) >= 4 else buf
    if magic != MAGIC:
        if len(magic) < 4 and MAGIC.startswith(magic):
            raise TruncatedError(f"{path}: truncated inside the magic bytes")
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}, expected {VERSION}")
    (count,) = r.unpack("<I", "tensor count")
    out = {}
    for k in range(count):
        (nlen,) = r.unpack("<I", f"name length of tensor {k}")
        name = r.take(nlen, f"name of tensor {k}").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after {count} tensors")
    return out


def save_checkpoint(model: ViTModel, path) -> None:
    cfg = model.config
    tensors = {_CONFIG_KEY: np.array([float(getattr(cfg, f)) for f in _CONFIG_FIELDS])}
    tensors.update({name: p.data for name, p in model.params.items()})
    write_tensors(path, tensors)


def load_checkpoint(path, config: Optional[ViTConfig] = None) -> ViTModel:
    """Load a model; if ``config`` is given the file must match it."""
    tensors = read_tensors(path)
    if _CONFIG_KEY not in tensors:
        raise CheckpointError(f"{path}: missing {_CONFIG_KEY} record")
    vals = tensors.pop(_CONFIG_KEY)
    if vals.shape != (len(_CONFIG_FIELDS),):
        raise ShapeMismatchError(f"{path}: {_CONFIG_KEY} has shape {vals.shape}")
    stored = ViTConfig(**{f: (bool(v) if f == "use_cls_token" else int(v))
                          for f, v in zip(_CONFIG_FIELDS, vals)})
    if config is not None and config != stored:
        raise ShapeMismatchError(f"{path}: stored config {stored} differs from requested {config}")
    expected = parameter_shapes(stored)
    if set(tensors) != set(expected):
        raise ShapeMismatchError(
            f"{path}: tensor names disagree with config "
            f"(missing {sorted(set(expected) - set(tensors))}, extra {sorted(set(tensors) - set(expected))})"
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    return ViTModel(stored, {k: Tensor(v) for k, v in tensors.items()})
