"""File plumbing: atomic writes, canonical JSON, fingerprints, CSV tables.

All numeric text output goes through ``repr(float(x))``: the shortest decimal
that round-trips to the same double, so files are diffable and reloads are
bitwise.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError


def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def atomic_write_text(path: Path | str, text: str) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: Path | str, payload) -> None:
    atomic_write_text(path, canonical_json(payload))


def read_json(path: Path | str):
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON ({exc})") from exc


def fingerprint(payload) -> str:
    """sha256 over the canonical compact JSON encoding of ``payload``."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def encode_matrix(arr: np.ndarray) -> dict:
    """Column-major JSON block: ``columns[j]`` is data column j."""
    a = np.asarray(arr, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return {
        "shape": [int(a.shape[0]), int(a.shape[1])],
        "columns": [[float(v) for v in a[:, j]] for j in range(a.shape[1])],
    }


def decode_matrix(block, *, name: str) -> np.ndarray:
    if not isinstance(block, dict) or "shape" not in block or "columns" not in block:
        raise SchemaError(f"block {name!r} is not a matrix block")
    rows, cols = (int(v) for v in block["shape"])
    columns = block["columns"]
    if len(columns) != cols or any(len(c) != rows for c in columns):
        raise SchemaError(f"block {name!r} shape {rows}x{cols} does not match its data")
    out = np.empty((rows, cols))
    for j, col in enumerate(columns):
        out[:, j] = col
    return out


def write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_matrix_csv(path: Path | str, arr: np.ndarray, header: Sequence[str] | None = None) -> None:
    """One header row plus full-precision comma-separated matrix rows."""
    a = np.asarray(arr, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if header is None:
        header = [f"col{j}" for j in range(a.shape[1])]
    if len(header) != a.shape[1]:
        raise ValueError(f"{len(header)} header fields for {a.shape[1]} columns")
    write_csv(path, header, a)
