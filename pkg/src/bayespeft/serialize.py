"""Bit-exact JSON records for matrices, checkpoints, and curvature files.

Matrices are stored as base64 of little-endian float64 bytes in row-major
order, so a save/load round trip reproduces every bit. Output is written with
sorted keys and no timestamps, hence byte-identical across reruns.
"""
from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import FormatError


def encode_matrix(m: np.ndarray) -> dict:
    m = np.ascontiguousarray(m, dtype="<f8")
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]),
            "data": base64.b64encode(m.tobytes()).decode("ascii")}


def decode_matrix(rec: dict) -> np.ndarray:
    try:
        rows, cols = int(rec["rows"]), int(rec["cols"])
        raw = base64.b64decode(rec["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed matrix record: {exc}") from exc
    if len(raw) != 8 * rows * cols:
        raise FormatError(f"matrix payload holds {len(raw)} bytes, expected {8 * rows * cols}")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, indent=1) + "\n"


def write_record(path, record: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(record))
    return path


def read_record(path, fmt: str, version: int) -> dict:
    try:
        record = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if not isinstance(record, dict) or record.get("format") != fmt:
        raise FormatError(f"{path} is not a {fmt} record")
    if record.get("version") != version:
        raise FormatError(f"{path}: version {record.get('version')!r}, expected {version}")
    return record


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
