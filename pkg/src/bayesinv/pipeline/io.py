"""Artifact formats: 16-bit binary PGM, float CSV and canonical JSON."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

__all__ = ["write_pgm16", "read_pgm16", "dequantize", "write_array_csv", "read_array_csv", "write_json", "jsonable"]

PGM_MAXVAL = 65535


def write_pgm16(path, image, lo=None, hi=None) -> dict:
    """Quantize ``image`` linearly from ``[lo, hi]`` to ``0..65535`` and write P5.

    ``lo`` and ``hi`` default to the image range. Returns the quantization
    record ``{"lo", "hi", "maxval"}`` needed to map codes back to values.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    lo = float(np.min(img)) if lo is None else float(lo)
    hi = float(np.max(img)) if hi is None else float(hi)
    if hi > lo:
        codes = np.rint((np.clip(img, lo, hi) - lo) / (hi - lo) * PGM_MAXVAL)
    else:
        codes = np.zeros_like(img)
    rows, cols = img.shape
    header = f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(codes.astype(">u2").tobytes())
    return {"lo": lo, "hi": hi, "maxval": PGM_MAXVAL}


def read_pgm16(path):
    """Return the integer code array of a binary PGM written by :func:`write_pgm16`."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1  # single whitespace byte after maxval
    magic, cols, rows, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"not a binary PGM (magic {magic!r})")
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data[pos:], dtype=dtype, count=rows * cols)
    return arr.reshape(rows, cols).astype(np.int64)


def dequantize(codes, record):
    lo, hi, maxval = record["lo"], record["hi"], record["maxval"]
    return lo + np.asarray(codes, dtype=float) / maxval * (hi - lo)


def write_array_csv(path, array):
    """Header-free CSV with ``repr``-exact floats (integers for integer arrays)."""
    arr = np.atleast_2d(np.asarray(array))
    fmt = "%d" if np.issubdtype(arr.dtype, np.integer) else "%.17g"
    np.savetxt(path, arr, delimiter=",", fmt=fmt)


def read_array_csv(path, dtype=float):
    return np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)


def jsonable(obj):
    """Convert numpy scalars/arrays and non-finite floats into JSON values.

    Non-finite floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``.
    """
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
