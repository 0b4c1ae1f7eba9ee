"""Flat binary tensor container with a JSON header.

Layout::

    b"GSAVTNSR" | uint64 LE header length | UTF-8 JSON header | raw little-endian data

The header lists every tensor with dtype, shape, byte offset and length, plus a
free-form ``meta`` object (backend, frozen flags, ...). Used for decoder
parameters, diffusion bundles, optimizer state and float image dumps.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import MissingFile, SchemaViolation

MAGIC = b"GSAVTNSR"
FORMAT_VERSION = 1


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_tensors(tensors: Mapping[str, np.ndarray], kind: str, meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": arr.dtype.newbyteorder("<").str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def unpack_tensors(data: bytes) -> tuple[dict[str, np.ndarray], str, dict[str, Any]]:
    if data[:8] != MAGIC:
        raise SchemaViolation("not a gsavatar tensor file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise SchemaViolation(f"unsupported tensor file version {header.get('format_version')}")
    body = memoryview(data)[16 + hlen:]
    tensors: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        buf = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, header["kind"], header["meta"]


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], kind: str,
                 meta: Mapping[str, Any] | None = None) -> None:
    atomic_write_bytes(path, pack_tensors(tensors, kind, meta))


def load_tensors(path: str | os.PathLike, expect_kind: str | None = None):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing file: {path}")
    tensors, kind, meta = unpack_tensors(path.read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise SchemaViolation(f"{path}: expected kind {expect_kind!r}, found {kind!r}")
    return tensors, meta


def dump_float_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Lossless float dump of a rendered image (for test comparisons)."""
    save_tensors(path, {"image": np.asarray(image, dtype=np.float64)}, kind="float_image")


def load_float_image(path: str | os.PathLike) -> np.ndarray:
    tensors, _ = load_tensors(path, expect_kind="float_image")
    return tensors["image"]
