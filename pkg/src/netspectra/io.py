"""File formats shared by the modules: header+payload binaries and CSV tables.

Binary files are one JSON header line terminated by ``\\n`` followed by a
little-endian float64 payload whose length the header declares in ``count``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1


class CorruptFileError(ValueError):
    """Raised for truncated payloads, bad headers or version mismatches."""


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
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


def write_binary(path: str | Path, header: dict, payload: np.ndarray) -> None:
    payload = np.ascontiguousarray(payload, dtype="<f8").ravel()
    header = {"version": FORMAT_VERSION, **header, "count": int(payload.size)}
    line = json.dumps(header, sort_keys=True).encode() + b"\n"
    atomic_write_bytes(path, line + payload.tobytes())


def read_binary(path: str | Path, expected_format: str | None = None) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CorruptFileError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict) or "count" not in header:
        raise CorruptFileError(f"{path}: header lacks payload count")
    if header.get("version") != FORMAT_VERSION:
        raise CorruptFileError(f"{path}: version {header.get('version')!r}, expected {FORMAT_VERSION}")
    if expected_format is not None and header.get("format") != expected_format:
        raise CorruptFileError(f"{path}: format {header.get('format')!r}, expected {expected_format!r}")
    body = raw[newline + 1:]
    if len(body) != 8 * header["count"]:
        raise CorruptFileError(
            f"{path}: payload has {len(body)} bytes, header declares {8 * header['count']}"
        )
    return header, np.frombuffer(body, dtype="<f8").astype(np.float64)


def csv_text(columns: Sequence[str], rows: Iterable[Sequence], comments: dict | None = None) -> str:
    """CSV with optional leading ``# key: value`` lines, then a header row."""
    buf = io.StringIO()
    for key, value in (comments or {}).items():
        buf.write(f"# {key}: {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    return value


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence], comments: dict | None = None) -> None:
    atomic_write_bytes(path, csv_text(columns, rows, comments).encode("utf-8"))


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def write_json(path: str | Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode())


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
