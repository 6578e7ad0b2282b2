"""On-disk formats: RVT1 tensor files, binary PPM images, canonical JSON."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RVT1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<u2")}


class FormatError(ValueError):
    pass


def _code(dtype: np.dtype) -> int:
    for code, dt in DTYPES.items():
        if np.dtype(dtype).kind == dt.kind and np.dtype(dtype).itemsize == dt.itemsize:
            return code
    raise FormatError(f"unsupported dtype {dtype}")


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    code = _code(a.dtype)
    if a.ndim > 255:
        raise FormatError("rank too large")
    header = MAGIC + struct.pack("<BBH", code, a.ndim, 0)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic")
    code, rank, reserved = struct.unpack_from("<BBH", buf, 4)
    if code not in DTYPES or reserved != 0:
        raise FormatError("bad header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    dt = DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != n * dt.itemsize:
        raise FormatError("payload length does not match dims")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(path: str | Path, a: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(a))


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError("PPM needs an HxWx3 uint8 array")
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError("only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())
