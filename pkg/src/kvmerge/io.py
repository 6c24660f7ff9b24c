"""LKVT token-tensor files, canonical JSON, CSV and PGM writers.

LKVT layout (all little-endian)::

    b"LKVT" | u32 version=1 | u32 height | u32 width | u32 dim | f32[height*width*dim]

Payload is row-major by cell, then by embedding component.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError
from .numerics import Matrix

MAGIC = b"LKVT"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def write_token_tensor(path, matrix, height: int, width: int) -> None:
    arr = matrix.data if isinstance(matrix, Matrix) else np.asarray(matrix, dtype=np.float32)
    arr = arr.reshape(height * width, -1).astype("<f4")
    header = _HEADER.pack(MAGIC, VERSION, height, width, arr.shape[1])
    atomic_write_bytes(path, header + arr.tobytes(order="C"))


def read_token_tensor(path) -> tuple[Matrix, int, int]:
    """Returns (embeddings as (height*width, dim) Matrix, height, width)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic, expected b'LKVT'", offset=0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: need {_HEADER.size} bytes, got {len(raw)}", offset=len(raw))
    _, version, height, width, dim = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if height == 0 or width == 0 or dim == 0:
        raise FormatError("zero dimension in header", offset=8)
    expected = _HEADER.size + 4 * height * width * dim
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "trailing bytes in"
        raise FormatError(f"{kind} payload: expected {expected} bytes total, got {len(raw)}", offset=min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    return Matrix(height * width, dim, data), height, width


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _round_floats(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.6g}")
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item())
    return obj


def canonical_json(obj, sort_keys: bool = True) -> str:
    """Floats rounded to 6 significant digits, LF endings, trailing newline."""
    return json.dumps(_round_floats(obj), sort_keys=sort_keys, indent=2, ensure_ascii=True) + "\n"


def write_json(path, obj, sort_keys: bool = True) -> None:
    atomic_write_bytes(path, canonical_json(obj, sort_keys).encode("ascii"))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in row])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def pgm_bytes(pixels: np.ndarray) -> bytes:
    """Binary P5 greymap, maxval 255."""
    px = np.asarray(pixels, dtype=np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes(order="C")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a P5 greymap", offset=0)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def provenance_heatmap(provenance: Sequence[frozenset[int]], height: int, width: int) -> np.ndarray:
    """One pixel per original cell, value = id of the final token holding it, mod 256.

    Evicted cells (in no set) stay 0.
    """
    px = np.zeros(height * width, dtype=np.uint8)
    for token_id, cells in enumerate(provenance):
        for c in cells:
            px[c] = token_id % 256
    return px.reshape(height, width)
