"""Deterministic, round-trippable result files.

Floats are written with 17 significant digits, which is enough for an exact
binary round trip.  Non-finite floats become ``null``.  Because the format is
fixed, parsing a file and writing it again reproduces it byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = ["dumps", "write_jsonl", "read_jsonl", "write_csv", "read_csv", "snapshot_to_jsonable", "write_json"]


def format_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    text = format(x, ".17g")
    # keep floats recognisable as floats so a re-read does not turn them into ints
    return text if any(c in text for c in ".en") else text + ".0"


def _encode(obj: Any, out: list[str]) -> None:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k), ensure_ascii=True))
            out.append(":")
            _encode(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, v in enumerate(obj.tolist() if isinstance(obj, np.ndarray) else obj):
            if i:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """Compact JSON with 17-digit floats and key order preserved."""
    out: list[str] = []
    _encode(obj, out)
    return "".join(out)


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="ascii") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path: Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="ascii")


def _cell(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return "" if not math.isfinite(f) else format(f, ".17g")
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return "" if v is None else str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="ascii")


def read_csv(path: Path) -> list[dict]:
    with open(path, encoding="ascii", newline="") as fh:
        return list(csv.DictReader(fh))


def snapshot_to_jsonable(snap: dict) -> dict:
    return {
        key: [np.asarray(p).tolist() for p in val] if key != "heads" else [[np.asarray(p).tolist() for p in h] for h in val]
        for key, val in snap.items()
    }
