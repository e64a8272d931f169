"""CSV / JSON-lines report emission with stable formatting and atomic writes."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence


def atomic_write_bytes(path: Path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def fmt_number(v: Any) -> Any:
    """6 significant digits for floats; everything else untouched."""
    if isinstance(v, bool) or v is None:
        return v
    if isinstance(v, int):
        return v
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return float(f"{v:.6g}")
    if hasattr(v, "item"):  # numpy scalars
        return fmt_number(v.item())
    return v


def _cell(v: Any) -> str:
    v = fmt_number(v)
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return " ".join(_cell(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return "" if v is None else str(v)


def _jsonable(v: Any) -> Any:
    if isinstance(v, Mapping):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return fmt_number(v)


def dumps_json(doc: Any) -> str:
    return json.dumps(_jsonable(doc), sort_keys=False, separators=(",", ":"))


def render_csv(rows: Sequence[Mapping[str, Any]], columns: Sequence[str] | None = None) -> str:
    columns = list(columns) if columns is not None else (list(rows[0].keys()) if rows else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        if set(row.keys()) != set(columns):
            raise ValueError(f"row keys {sorted(row)} do not match columns {columns}")
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def render_jsonl(rows: Iterable[Mapping[str, Any]]) -> str:
    return "".join(dumps_json(r) + "\n" for r in rows)


def emit_report(rows: Sequence[Mapping[str, Any]], fmt: str, path, columns: Sequence[str] | None = None) -> Path:
    """Write rows as ``csv`` or ``json-lines``; column order follows the first row."""
    rows = list(rows)
    if fmt == "csv":
        text = render_csv(rows, columns)
    elif fmt in ("json-lines", "jsonl"):
        if rows:
            keys = set(rows[0])
            for r in rows:
                if set(r) != keys:
                    raise ValueError("json-lines rows must be homogeneous")
        text = render_jsonl(rows)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return atomic_write_text(Path(path), text)


def write_json(path, doc: Any) -> Path:
    return atomic_write_text(Path(path), json.dumps(_jsonable(doc), indent=2) + "\n")
