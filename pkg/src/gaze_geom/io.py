"""File formats used by the command-line tools.

* CSV with a header row; floats use Python's shortest round-trip repr so
  values reload bit-identically.
* JSON documents carry a ``schema_version``; a mismatch is an error.
* Masks are binary PGM (P5, maxval <= 255).  A pixel is foreground when its
  value is >= 128; as a probability it reads ``value / 255``.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .errors import FileNotFound, ParseError, SchemaMismatch

SCHEMA_VERSION = 1


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFound(f"no such file: {p}", path=p)
    return p


def require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFound(f"no such directory: {p}", path=p)
    return p


# -- JSON ---------------------------------------------------------------------


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path, schema: bool = True) -> dict:
    p = require_file(path)
    try:
        with open(p, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"invalid JSON: {exc}", path=p) from exc
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", path=p)
    if schema:
        check_schema(obj, p)
    return obj


def check_schema(obj: dict, path=None) -> None:
    if "schema_version" not in obj:
        raise SchemaMismatch("missing schema_version", path=path, field="schema_version")
    if obj["schema_version"] != SCHEMA_VERSION:
        raise SchemaMismatch(
            f"schema_version {obj['schema_version']!r}, expected {SCHEMA_VERSION}",
            path=path,
            field="schema_version",
        )


def get_field(obj: dict, key: str, path=None, kind=None):
    if key not in obj:
        raise SchemaMismatch(f"missing field {key!r}", path=path, field=key)
    v = obj[key]
    if kind is not None and not isinstance(v, kind):
        raise SchemaMismatch(f"field {key!r} has the wrong type", path=path, field=key)
    return v


# -- CSV ----------------------------------------------------------------------


def write_table(path, columns: list, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_table(path, required=()) -> dict:
    """Columns of a headed CSV as a dict of string lists."""
    p = require_file(path)
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty CSV, expected a header row", path=p) from None
        header = [h.strip() for h in header]
        cols = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"line {lineno}: {len(row)} fields, expected {len(header)}", path=p)
            for h, v in zip(header, row):
                cols[h].append(v)
    for name in required:
        if name not in cols:
            raise SchemaMismatch(f"missing column {name!r}", path=p, field=name)
    return cols


def float_column(cols: dict, name: str, path=None) -> np.ndarray:
    try:
        return np.array([float(v) for v in cols[name]], dtype=float)
    except KeyError:
        raise SchemaMismatch(f"missing column {name!r}", path=path, field=name) from None
    except ValueError as exc:
        raise ParseError(f"column {name!r}: {exc}", path=path, field=name) from exc


def int_column(cols: dict, name: str, path=None) -> np.ndarray:
    try:
        return np.array([int(v) for v in cols[name]], dtype=np.int64)
    except KeyError:
        raise SchemaMismatch(f"missing column {name!r}", path=path, field=name) from None
    except ValueError as exc:
        raise ParseError(f"column {name!r}: {exc}", path=path, field=name) from exc


def write_points(path, points) -> None:
    write_table(path, ["x", "y"], np.asarray(points, dtype=float).reshape(-1, 2).tolist())


def read_points(path) -> np.ndarray:
    cols = read_table(path, required=("x", "y"))
    return np.column_stack([float_column(cols, "x", path), float_column(cols, "y", path)]).reshape(-1, 2)


# -- PGM ----------------------------------------------------------------------


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Raw 8-bit image as a (height, width) uint8 array."""
    p = require_file(path)
    data = p.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and chr(data[pos]).isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not chr(data[pos]).isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path=p)
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ParseError(f"not a binary PGM (magic {tokens[0]!r})", path=p)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"bad PGM header: {exc}", path=p) from exc
    if not 0 < maxval <= 255:
        raise ParseError(f"unsupported maxval {maxval}", path=p)
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise ParseError("truncated PGM data", path=p)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def read_mask(path) -> np.ndarray:
    return (read_pgm(path) >= 128).astype(np.uint8)


def read_prob(path) -> np.ndarray:
    return read_pgm(path).astype(float) / 255.0


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
