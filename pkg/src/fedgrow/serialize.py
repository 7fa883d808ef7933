"""Flat binary codec for named float64 tensor collections.

Layout: 8-byte magic, JSON metadata blob, entry table (name, shape), then
the raw values as little-endian float64 in entry order. The same format
backs model checkpoints and operator exchange payloads.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FGBIN01\x00"


class FormatError(ValueError):
    """Payload does not follow the expected binary layout."""


def dump_entries(fp, entries: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    fp.write(MAGIC)
    fp.write(struct.pack("<I", len(meta_blob)))
    fp.write(meta_blob)
    fp.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        blob = name.encode("utf-8")
        if len(blob) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:32]!r}...")
        fp.write(struct.pack("<H", len(blob)))
        fp.write(blob)
        arr = np.asarray(arr)
        fp.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            fp.write(struct.pack("<I", extent))
    for arr in entries.values():
        fp.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_entries(fp) -> tuple[dict[str, np.ndarray], dict]:
    def take(n: int) -> bytes:
        blob = fp.read(n)
        if len(blob) != n:
            raise FormatError("truncated payload")
        return blob

    if take(len(MAGIC)) != MAGIC:
        raise FormatError("bad magic; not a fedgrow tensor payload")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        shapes.append((name, shape))
    entries: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        raw = take(size * 8)
        entries[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return entries, meta


def dumps_entries(entries: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    dump_entries(buf, entries, meta)
    return buf.getvalue()


def loads_entries(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    return load_entries(io.BytesIO(data))


def save_entries(path, entries: dict[str, np.ndarray], meta: dict | None = None) -> None:
    with Path(path).open("wb") as fp:
        dump_entries(fp, entries, meta)


def read_entries(path) -> tuple[dict[str, np.ndarray], dict]:
    with Path(path).open("rb") as fp:
        return load_entries(fp)
