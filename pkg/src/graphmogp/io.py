"""File formats: dataset/query CSV and JSON with 17-significant-digit floats."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import MultiDataset, TestQuery


def format_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def _encode(obj, indent, level) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path, what: str = "JSON"):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read {what} file {path}: {exc}") from exc


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_rows(path, need_y: bool):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read CSV file {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError(f"{path}: empty CSV") from None
    xcols = [h for h in header if h.startswith("x")]
    want = ["vertex"] + [f"x{i}" for i in range(len(xcols))] + (["y"] if need_y else [])
    if header != want or not xcols:
        raise ParseError(f"{path}: header must be {','.join(want[:2])},...{',y' if need_y else ''}; got {','.join(header)}")
    vs, xs, ys = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            v = int(row[0])
            vals = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if v < 0:
            raise ParseError(f"{path}:{lineno}: negative vertex id {v}")
        if not all(math.isfinite(c) for c in vals):
            raise ParseError(f"{path}:{lineno}: non-finite value")
        vs.append(v)
        xs.append(vals[: len(xcols)])
        if need_y:
            ys.append(vals[-1])
    d = len(xcols)
    return np.array(vs, dtype=int), np.array(xs, dtype=float).reshape(-1, d), np.array(ys, dtype=float)


def read_dataset_csv(path, num_vertices: int | None = None) -> MultiDataset:
    """Read ``vertex,x0,...,x{D-1},y`` rows; blocks keep file order."""
    v, x, y = _read_rows(path, need_y=True)
    m = num_vertices if num_vertices is not None else (int(v.max()) + 1 if v.size else 0)
    if v.size and v.max() >= m:
        raise ParseError(f"{path}: vertex id {int(v.max())} outside graph of size {m}")
    return MultiDataset.from_stacked(x, v, y, m)


def write_dataset_csv(data: MultiDataset, path) -> None:
    Path(path).write_text(_rows_text(data.vertex, data.x, data.y), encoding="utf-8")


def read_query_csv(path) -> TestQuery:
    """Read ``vertex,x0,...`` rows (a trailing ``y`` column is also accepted)."""
    try:
        v, x, _ = _read_rows(path, need_y=False)
    except ParseError:
        v, x, _ = _read_rows(path, need_y=True)
    return query_from_rows(v, x)


def query_from_rows(v, x) -> TestQuery:
    order = list(dict.fromkeys(int(a) for a in v))
    return TestQuery(tuple(order), tuple(x[v == u] for u in order))


def read_truth_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return _read_rows(path, need_y=True)


def write_query_csv(query: TestQuery, path, y=None) -> None:
    Path(path).write_text(_rows_text(query.vertex, query.x, y), encoding="utf-8")


def _rows_text(vertex, x, y=None) -> str:
    d = x.shape[1]
    head = ["vertex"] + [f"x{i}" for i in range(d)] + (["y"] if y is not None else [])
    lines = [",".join(head)]
    for i in range(x.shape[0]):
        cells = [str(int(vertex[i]))] + [format_float(c) for c in x[i]]
        if y is not None:
            cells.append(format_float(y[i]))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
