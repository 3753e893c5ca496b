"""Binary checkpoint format.

Layout: magic b"AVSRCKP1" | u32 LE header length | UTF-8 JSON header | raw little-endian arrays.
The header maps each array name to {shape, dtype, byte_offset, trainable, frozen_group}; offsets are
relative to the start of the array block. Run metadata sits under the reserved key "__meta__".
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"AVSRCKP1"
META_KEY = "__meta__"
_DTYPES = {"f32": np.dtype("<f4"), "i64": np.dtype("<i8")}


@dataclass
class ArrayInfo:
    trainable: bool = False
    frozen_group: str | None = None


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    info: dict[str, ArrayInfo] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def iteration(self) -> int:
        return int(self.meta.get("iteration", 0))

    @property
    def stage(self) -> int:
        return int(self.meta.get("stage", 1))


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f32"
    if arr.dtype.kind in "iu":
        return "i64"
    raise FormatError(f"unsupported array dtype {arr.dtype}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    header: dict = {META_KEY: ckpt.meta}
    blobs = []
    offset = 0
    for name, arr in ckpt.arrays.items():
        if name == META_KEY:
            raise FormatError(f"array name {META_KEY!r} is reserved")
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes(order="C")
        info = ckpt.info.get(name, ArrayInfo())
        header[name] = {
            "shape": list(arr.shape),
            "dtype": tag,
            "byte_offset": offset,
            "trainable": bool(info.trainable),
            "frozen_group": info.frozen_group,
        }
        blobs.append(data)
        offset += len(data)
    head = json.dumps(header, sort_keys=False).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated checkpoint")
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    if 12 + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} runs past end of file")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupted header ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")
    meta = header.pop(META_KEY, {})
    base = 12 + hlen
    arrays, info = {}, {}
    for name, entry in header.items():
        try:
            dt = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            start = base + int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed entry for {name!r}") from exc
        count = int(np.prod(shape)) if shape else 1
        end = start + count * dt.itemsize
        if start < base or end > len(raw):
            raise FormatError(f"{path}: array {name!r} is truncated")
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(shape).copy()
        info[name] = ArrayInfo(bool(entry.get("trainable", False)), entry.get("frozen_group"))
    return Checkpoint(arrays, info, meta)
