"""Flat binary array container and atomic file writes.

Layout: 4-byte magic, then u32 C, H, W (little-endian), then C*H*W float32
little-endian values in C-major, row-major order.  The same layout carries
heatmaps ("FMHM"), sampled priors ("FMSP"), decoder weights ("FMWT") and
point gradients ("FMGR").
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

HEADER = struct.Struct("<4sIII")
MAGICS = (b"FMHM", b"FMSP", b"FMWT", b"FMGR")

PathLike = Union[str, os.PathLike]


class ContainerError(ValueError):
    pass


def encode(values: np.ndarray, magic: bytes = b"FMHM") -> bytes:
    if magic not in MAGICS:
        raise ContainerError(f"unknown magic {magic!r}")
    arr = np.asarray(values)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContainerError(f"expected a 2-D or 3-D array, got shape {arr.shape}")
    c, h, w = arr.shape
    return HEADER.pack(magic, c, h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(blob: bytes, magic: bytes | None = None) -> tuple[bytes, np.ndarray]:
    if len(blob) < HEADER.size:
        raise ContainerError("truncated header")
    got, c, h, w = HEADER.unpack_from(blob)
    if got not in MAGICS:
        raise ContainerError(f"bad magic {got!r}")
    if magic is not None and got != magic:
        raise ContainerError(f"expected magic {magic!r}, found {got!r}")
    n = c * h * w
    if len(blob) != HEADER.size + 4 * n:
        raise ContainerError(f"payload size mismatch for {c}x{h}x{w}")
    arr = np.frombuffer(blob, dtype="<f4", count=n, offset=HEADER.size).reshape(c, h, w)
    return got, arr.astype(np.float64)


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_array(path: PathLike, values: np.ndarray, magic: bytes = b"FMHM") -> None:
    atomic_write_bytes(path, encode(values, magic))


def read_array(path: PathLike, magic: bytes | None = None) -> np.ndarray:
    return decode(Path(path).read_bytes(), magic)[1]


def write_named_arrays(path: PathLike, arrays: dict[str, np.ndarray], magic: bytes = b"FMWT") -> dict:
    """Concatenate named arrays into one container plus a JSON manifest of shapes and offsets.

    The manifest is written next to ``path`` as ``<path>.json`` and returned.
    """
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    write_array(path, flat.reshape(1, 1, -1), magic)
    doc = {"magic": magic.decode(), "count": offset, "arrays": manifest}
    atomic_write_text(f"{path}.json", json.dumps(doc, indent=1) + "\n")
    return doc


def read_named_arrays(path: PathLike) -> dict[str, np.ndarray]:
    doc = json.loads(Path(f"{path}.json").read_text())
    flat = read_array(path, doc["magic"].encode()).reshape(-1)
    out = {}
    for item in doc["arrays"]:
        size = int(np.prod(item["shape"])) if item["shape"] else 1
        out[item["name"]] = flat[item["offset"]:item["offset"] + size].reshape(item["shape"])
    return out
