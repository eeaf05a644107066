"""Flat-file writers: CSV tables and ``key: value`` reports.

Every file starts with ``#`` provenance lines; everything after them is the
body, which is byte-stable for a given effective config.
"""

from __future__ import annotations

import datetime as _dt
import enum
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from . import __version__


def fmt(v) -> str:
    """Locale-free decimal with 9 significant digits (no exponent)."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if v == 0:
        return "0"
    return np.format_float_positional(v, precision=9, unique=False, fractional=False, trim="-")


def provenance_lines(command: str, config: dict) -> list[str]:
    stamp = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    return [
        f"# generated: {stamp}",
        f"# oqkd {__version__} command: {command}",
        "# config: " + json.dumps(config, sort_keys=True, separators=(",", ":")),
    ]


def atomic_write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_text(header: list[str], columns, provenance: list[str]) -> str:
    cols = [np.asarray(c) for c in columns]
    n = cols[0].shape[0] if cols else 0
    if any(c.shape[0] != n for c in cols):
        raise ValueError("columns differ in length")
    lines = list(provenance)
    lines.append(",".join(header))
    fmts = [_column_formatter(c) for c in cols]
    for i in range(n):
        lines.append(",".join(f(c[i]) for f, c in zip(fmts, cols)))
    return "\n".join(lines) + "\n"


def _column_formatter(col: np.ndarray):
    if col.dtype == bool:
        return lambda v: "true" if v else "false"
    if np.issubdtype(col.dtype, np.integer):
        return lambda v: str(int(v))
    if col.dtype.kind in "OUS":
        return fmt
    return fmt


def flatten(report: dict, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for key, value in report.items():
        name = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            out.extend(flatten(value, name))
        else:
            out.append((name, value))
    return out


def report_text(report: dict, provenance: list[str]) -> str:
    lines = list(provenance)
    lines.extend(f"{k}: {fmt(v)}" for k, v in flatten(report))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(": ")
        out[key] = value
    return out


def body(text: str) -> str:
    """File content without provenance comment lines."""
    return "".join(l for l in text.splitlines(keepends=True) if not l.startswith("#"))


def read_provenance_config(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            if line.startswith("# config: "):
                return json.loads(line[len("# config: "):])
    raise ValueError(f"{path}: no provenance config line")
