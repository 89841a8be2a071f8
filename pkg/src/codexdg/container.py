"""Binary container shared by dataset and checkpoint files.

Layout (all integers little-endian)::

    magic       4 bytes ("CDXD" dataset, "CDXC" checkpoint)
    version     u32
    header_len  u64
    header      UTF-8 JSON, keys sorted, compact separators
    payload     float64 arrays, little-endian, C order, in the order given
                by header["arrays"]
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Type, Union

import numpy as np

FORMAT_VERSION = 1
PathLike = Union[str, Path]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(magic: bytes, header: dict, arrays: List[Tuple[str, np.ndarray]]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(np.shape(arr))} for name, arr in arrays]
    blob = canonical_json(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def decode(raw: bytes, magic: bytes, error: Type[Exception] = ValueError) -> Tuple[dict, Dict[str, np.ndarray]]:
    if len(raw) < 16 or raw[:4] != magic:
        raise error(f"not a {magic.decode()} file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise error(f"unsupported {magic.decode()} version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    end = 16 + hlen
    if end > len(raw):
        raise error("truncated header")
    try:
        header = json.loads(raw[16:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise error(f"corrupt header: {exc}") from None
    arrays: Dict[str, np.ndarray] = {}
    offset = end
    for spec in header.get("arrays", []):
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise error(f"truncated payload while reading {spec['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
        arrays[spec["name"]] = arr.reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise error("trailing bytes after payload")
    return header, arrays


def write(path: PathLike, magic: bytes, header: dict, arrays: List[Tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(magic, header, arrays))


def read(path: PathLike, magic: bytes, error: Type[Exception] = ValueError):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise error(f"cannot read {path}: {exc}") from None
    return decode(raw, magic, error)
