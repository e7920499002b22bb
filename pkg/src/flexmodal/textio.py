"""Plain-text serialization used by every file format in the toolkit.

Two building blocks cover all formats:

* key/value documents: one ``key: value`` pair per line, values are scalars
  or (nested) arrays in bracket syntax.  Reals are written with 17
  significant digits, which is enough for ``float(str(x))`` to restore the
  exact IEEE-754 double, so write/read round trips are bit-exact.
* columnar tables: a header line naming the columns, then one row of
  whitespace-separated values per record.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .errors import ValidationError


def format_float(x) -> str:
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise ValidationError("refusing to serialize NaN/Inf")
    return format(x, ".17g")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, np.ndarray):
        return _format_value(v.tolist())
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    if v is None:
        return "null"
    raise ValidationError(f"cannot serialize value of type {type(v).__name__}")


def dump_kv(pairs) -> str:
    """Render an ordered sequence of (key, value) pairs as a kv document."""
    lines = []
    for key, value in pairs:
        lines.append(f"{key}: {_format_value(value)}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict:
    """Parse a kv document into an insertion-ordered dict.

    Values use JSON syntax for scalars/arrays/strings; NaN and Inf are
    rejected.  Lines starting with '#' and blank lines are skipped.
    """
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValidationError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, _, value = line.partition(":")
        key = key.strip()
        if not key:
            raise ValidationError(f"line {lineno}: empty key")
        if key in out:
            raise ValidationError(f"line {lineno}: duplicate key {key!r}")
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
        _reject_non_finite(parsed, key, lineno)
        out[key] = parsed
    return out


def _reject_non_finite(value, key, lineno):
    if isinstance(value, float) and not math.isfinite(value):
        raise ValidationError(f"line {lineno}: non-finite number in {key!r}")
    if isinstance(value, list):
        for v in value:
            _reject_non_finite(v, key, lineno)


def write_kv_file(path, pairs, header: str | None = None):
    text = dump_kv(pairs)
    if header:
        text = "".join(f"# {line}\n" for line in header.splitlines()) + text
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_kv_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def write_table(path, columns, rows, meta=None):
    """Write a columnar text table.

    ``meta`` is an optional ordered mapping emitted as '# key: value' comment
    lines before the header so that readers can recover record metadata.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if meta:
            for key, value in meta.items():
                fh.write(f"# {key}: {_format_value(value)}\n")
        fh.write(" ".join(columns) + "\n")
        for row in rows:
            fh.write(" ".join(_cell(x) for x in row) + "\n")


def _cell(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format_float(x)


def read_table(path):
    """Read a table written by :func:`write_table`.

    Returns (meta, columns, rows) where rows is a list of string lists; the
    caller converts columns to the types it expects.
    """
    meta: dict = {}
    columns = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, _, value = body.partition(":")
                    try:
                        meta[key.strip()] = json.loads(value.strip())
                    except json.JSONDecodeError:
                        meta[key.strip()] = value.strip()
                continue
            if columns is None:
                columns = line.split()
            else:
                rows.append(line.split())
    if columns is None:
        raise ValidationError(f"{path}: no header line")
    return meta, columns, rows


def parse_float_cell(cell: str, where: str = "") -> float:
    x = float(cell)
    if not math.isfinite(x):
        raise ValidationError(f"non-finite value {cell!r} {where}".strip())
    return x
