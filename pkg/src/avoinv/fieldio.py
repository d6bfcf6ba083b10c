"""Grid field files: ``i,j,value`` CSV and the ``FLDV`` binary container."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .grf_fft import GridSpec

__all__ = ["write_field_csv", "read_field_csv", "write_fields", "read_fields"]

_MAGIC = b"FLDV"
_VERSION = 1
_HEADER = struct.Struct("<4sBIII")


def write_field_csv(path, grid: GridSpec, values) -> None:
    v = np.asarray(values, dtype=float).ravel()
    if v.size != grid.size:
        raise ValueError(f"field has {v.size} values, grid has {grid.size} cells")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        for i in range(grid.nx):
            for j in range(grid.ny):
                w.writerow([i, j, repr(float(v[grid.index(i, j)]))])


def read_field_csv(path) -> tuple[GridSpec, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["i", "j", "value"]:
        raise ValueError(f"{path}: expected header i,j,value")
    cells = [(int(r[0]), int(r[1]), float(r[2])) for r in rows[1:] if r]
    if not cells:
        raise ValueError(f"{path}: no cells")
    grid = GridSpec(max(c[0] for c in cells) + 1, max(c[1] for c in cells) + 1)
    if len(cells) != grid.size:
        raise ValueError(f"{path}: {len(cells)} rows for a {grid.nx}x{grid.ny} grid")
    out = np.full(grid.size, np.nan)
    for i, j, val in cells:
        out[grid.index(i, j)] = val
    if np.isnan(out).any():
        raise ValueError(f"{path}: duplicate or missing cells")
    return grid, out


def write_fields(path, grid: GridSpec, fields) -> None:
    """``FLDV``: magic, version byte, nx, ny, field count (u32 LE), then row-major f64 LE values."""
    arr = np.asarray(fields, dtype=float).reshape(-1, grid.size)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, grid.nx, grid.ny, arr.shape[0]))
        fh.write(arr.astype("<f8").tobytes())


def read_fields(path) -> tuple[GridSpec, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated FLDV file")
    magic, version, nx, ny, k = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported FLDV version {version}")
    expected = _HEADER.size + 8 * nx * ny * k
    if len(raw) != expected:
        raise ValueError(f"FLDV payload has {len(raw)} bytes, expected {expected}")
    grid = GridSpec(nx, ny)
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    return grid, vals.reshape(k, grid.size)
