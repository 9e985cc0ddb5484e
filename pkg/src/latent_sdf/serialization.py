"""The ``DSDF`` binary container (little-endian throughout).

Header: ``b"DSDF"``, ``u32 version``, ``u32 kind``.

``kind == KIND_LATENTS``
    ``u64 count``, ``u64 dim``, then ``count * dim`` f64 values row-major.
``kind == KIND_TENSORS``
    ``u32 meta_len`` + UTF-8 JSON metadata, ``u32 n_tensors``, then per
    tensor: ``u32 name_len``, name bytes, ``u32 rank``, ``rank * u64`` dims,
    f64 payload.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSDF"
VERSION = 1
KIND_LATENTS = 1
KIND_TENSORS = 2


class FormatError(ValueError):
    pass


def _header(kind: int) -> bytes:
    return MAGIC + struct.pack("<II", VERSION, kind)


def _read_header(buf: io.BufferedIOBase, path) -> int:
    if buf.read(4) != MAGIC:
        raise FormatError(f"{path}: not a DSDF file")
    version, kind = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported DSDF version {version}")
    return kind


def save_latents(path, latents: np.ndarray) -> None:
    z = np.ascontiguousarray(latents, dtype="<f8")
    if z.ndim != 2:
        raise ValueError("latents must be a (count, dim) array")
    with open(path, "wb") as fh:
        fh.write(_header(KIND_LATENTS))
        fh.write(struct.pack("<QQ", *z.shape))
        fh.write(z.tobytes())


def load_latents(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_header(fh, path) != KIND_LATENTS:
            raise FormatError(f"{path}: not a latent file")
        count, dim = struct.unpack("<QQ", fh.read(16))
        data = fh.read()
    if len(data) != 8 * count * dim:
        raise FormatError(f"{path}: truncated latent payload")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(count, dim)


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    out = io.BytesIO()
    out.write(_header(KIND_TENSORS))
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")  # keeps 0-d shapes
        encoded = name.encode()
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    Path(path).write_bytes(out.getvalue())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = io.BytesIO(Path(path).read_bytes())
    if _read_header(buf, path) != KIND_TENSORS:
        raise FormatError(f"{path}: not a tensor checkpoint")
    (meta_len,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(meta_len).decode())
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", buf.read(4))
        name = buf.read(name_len).decode()
        (rank,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        raw = buf.read(8 * n)
        if len(raw) != 8 * n:
            raise FormatError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return tensors, meta
