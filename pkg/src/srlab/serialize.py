"""Binary tensor container plus simple image/sidecar writers.

Container layout (all integers little-endian):

    magic    4 bytes  b"SRLB"
    version  u32      currently 1
    meta_len u32      length of the UTF-8 JSON metadata blob
    meta     bytes    JSON object (free-form metadata)
    count    u32      number of tensors
    per tensor:
        name_len u16, name UTF-8 bytes,
        ndim u8, dims u32 * ndim,
        payload float64 little-endian, row-major
    crc      u32      zlib.crc32 of every preceding byte

The trailing checksum makes truncation and bit rot detectable; loading a
damaged file raises `FormatError` rather than crashing. Writes go through
a temp file and an atomic rename. The same container holds model weights
and cached adversarial examples.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

__all__ = [
    "FormatError",
    "save_tensors",
    "load_tensors",
    "write_pgm",
    "write_ppm",
    "write_disparity_text",
    "atomic_write_bytes",
    "atomic_write_text",
]

_MAGIC = b"SRLB"
_VERSION = 1


class FormatError(ValueError):
    """Raised when a binary container fails validation."""


def atomic_write_bytes(path, payload):
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensors(path, tensors, meta=None):
    """Write named float64 arrays plus a JSON metadata dict."""
    parts = [_MAGIC, struct.pack("<I", _VERSION)]
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_blob)))
    parts.append(meta_blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim:
            arr = np.ascontiguousarray(arr)  # 0-d arrays stay 0-d
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:32]}...")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f8").tobytes())
    body = b"".join(parts)
    atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated container while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt, what):
        (v,) = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return v


def load_tensors(path):
    """Read a container written by `save_tensors`; returns (tensors, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 + 4 + 4:
        raise FormatError("file too short to be a tensor container")
    body, crc_bytes = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise FormatError("checksum mismatch: container corrupted or truncated")

    r = _Reader(body)
    if r.take(4, "magic") != _MAGIC:
        raise FormatError("bad magic: not a tensor container")
    version = r.u("<I", "version")
    if version != _VERSION:
        raise FormatError(f"unsupported container version {version}")
    meta_len = r.u("<I", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    count = r.u("<I", "tensor count")
    tensors = {}
    for k in range(count):
        name_len = r.u("<H", f"name length of tensor {k}")
        name = r.take(name_len, f"name of tensor {k}").decode("utf-8")
        ndim = r.u("<B", f"rank of {name}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"shape of {name}")) if ndim else ()
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = r.take(8 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes after last tensor")
    return tensors, meta


# -- portable image / sidecar writers -----------------------------------------


def write_pgm(path, img):
    """Binary PGM (P5) from a [H,W] array of values in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM writer expects [H,W], got shape {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + q.tobytes())


def write_ppm(path, img):
    """Binary PPM (P6) from a [3,H,W] array of values in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM writer expects [3,H,W], got shape {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + q.transpose(1, 2, 0).tobytes())


def write_disparity_text(path, values, valid=None):
    """Plain-text disparity grid: first line "H W", then H rows of W
    space-separated values; invalid pixels are written as -1."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"disparity writer expects [H,W], got shape {values.shape}")
    if valid is None:
        valid = np.ones(values.shape, dtype=bool)
    lines = [f"{values.shape[0]} {values.shape[1]}"]
    for y in range(values.shape[0]):
        row = [f"{values[y, x]:.4f}" if valid[y, x] else "-1" for x in range(values.shape[1])]
        lines.append(" ".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")
