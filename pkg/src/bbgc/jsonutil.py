"""Canonical JSON emission.

Reports and calibration artifacts must be byte-stable across runs and
worker counts, so this module renders JSON itself: floats go through a
single fixed ``%.9g`` format (round-trips everything the toolkit emits
at far above its numeric tolerances), objects keep insertion order, and
indentation is fixed at two spaces.  The stdlib encoder is not used for
output because it hard-binds ``float.__repr__``; parsing still uses
``json.loads``.
"""

from __future__ import annotations

import base64
import json
from typing import Any

import numpy as np


def format_float(f: float, style: str = "report") -> str:
    """Fixed rendering: 9 significant digits for reports, shortest
    round-trip (repr) for model files that must reload bit-identically."""
    if not np.isfinite(f):
        raise ValueError(f"non-finite value in report: {f}")
    if style == "exact":
        return repr(float(f))
    return format(float(f), ".9g")


def _emit(value: Any, indent: int, style: str) -> str:
    pad = " " * indent
    inner = " " * (indent + 2)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = (
            f"{inner}{json.dumps(str(k))}: {_emit(v, indent + 2, style)}"
            for k, v in value.items()
        )
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(value, (list, tuple)):
        if not len(value):
            return "[]"
        items = (f"{inner}{_emit(v, indent + 2, style)}" for v in value)
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(value, np.ndarray):
        return _emit(value.tolist(), indent, style)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(float(value), style)
    if isinstance(value, str):
        return json.dumps(value)
    raise TypeError(f"unserializable type {type(value)!r}")


def dumps(obj: Any, float_style: str = "report") -> str:
    """Serialize with fixed float formatting and stable key order."""
    return _emit(obj, 0, float_style)


def write_json(path: str, obj: Any, float_style: str = "report") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj, float_style))
        fh.write("\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


_MATRIX_DTYPES = {"f4": "<f4", "f8": "<f8"}


def encode_matrix(m: np.ndarray, dtype: str = "f4") -> dict[str, Any]:
    """Base64 payload for a float matrix, little-endian row-major."""
    if dtype not in _MATRIX_DTYPES:
        raise ValueError(f"unsupported matrix dtype {dtype!r}")
    m = np.ascontiguousarray(m, dtype=_MATRIX_DTYPES[dtype])
    return {
        "rows": int(m.shape[0]),
        "cols": int(m.shape[1]),
        "dtype": dtype,
        "data": base64.b64encode(m.tobytes()).decode("ascii"),
    }


def decode_matrix(payload: dict[str, Any]) -> np.ndarray:
    dtype = payload.get("dtype")
    if dtype not in _MATRIX_DTYPES:
        raise ValueError(f"unsupported matrix dtype {dtype!r}")
    rows, cols = int(payload["rows"]), int(payload["cols"])
    raw = base64.b64decode(payload["data"])
    itemsize = np.dtype(_MATRIX_DTYPES[dtype]).itemsize
    if len(raw) != rows * cols * itemsize:
        raise ValueError("matrix payload length does not match its shape")
    return (np.frombuffer(raw, dtype=_MATRIX_DTYPES[dtype])
            .reshape(rows, cols).astype(np.float64))
