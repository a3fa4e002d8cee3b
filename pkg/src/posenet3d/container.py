"""Binary named-array container used for body models, checkpoints and exports.

Layout (little endian)::

    magic      7 ascii bytes, e.g. b"PN3D-BM"
    version    u32
    records    repeated until end of file:
        name length u32, utf-8 name,
        dtype tag   3 ascii bytes: b"f64" or b"u08",
        rank u32, extents u64 * rank,
        row-major payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1
MAGIC_LEN = 7
_TAGS = {b"f64": np.dtype("<f8"), b"u08": np.dtype("u1")}


class FormatError(ValueError):
    pass


def _tag_for(arr: np.ndarray) -> tuple[bytes, np.ndarray]:
    if arr.dtype == np.uint8:
        return b"u08", arr
    return b"f64", np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d


def encode(magic: bytes, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != MAGIC_LEN:
        raise ValueError(f"magic must be {MAGIC_LEN} bytes")
    parts = [magic, struct.pack("<I", VERSION)]
    for name, value in arrays.items():
        tag, arr = _tag_for(np.asarray(value))
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(tag)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(blob: bytes, magic: bytes) -> dict[str, np.ndarray]:
    if blob[:MAGIC_LEN] != magic:
        raise FormatError(f"bad magic at byte 0: expected {magic!r}, found {blob[:MAGIC_LEN]!r}")
    pos = MAGIC_LEN

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated {what} at byte {pos}: need {n} bytes, {len(blob) - pos} left")
        out = blob[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte {MAGIC_LEN}")
    arrays: dict[str, np.ndarray] = {}
    while pos < len(blob):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record name is not utf-8 at byte {start + 4}") from exc
        tag_pos = pos
        tag = take(3, "dtype tag")
        if tag not in _TAGS:
            raise FormatError(f"unknown dtype tag {tag!r} at byte {tag_pos}")
        dtype = _TAGS[tag]
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 32:
            raise FormatError(f"implausible rank {rank} at byte {pos - 4}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(count * dtype.itemsize, f"payload of {name!r}")
        if name in arrays:
            raise FormatError(f"duplicate record {name!r} at byte {start}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return arrays


def write(path, magic: bytes, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, arrays))


def read(path, magic: bytes) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), magic)


def pack_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))
