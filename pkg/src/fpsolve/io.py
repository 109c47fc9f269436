"""CSV formats for point sets, grid fields, checkpoints and curves.

Every file starts with ``#`` metadata lines (``# key: value``), then a header
row, then comma-separated rows. Floats are written with ``repr`` so they
round-trip exactly; missing values are empty fields.
"""
import csv
import io as _io
import math
from pathlib import Path

import numpy as np

from .grid import DensityField, Domain, GridSpec
from .neural import MlpParams

CHECKPOINT_MAGIC = "fpsolve-mlp v1"


def format_float(value):
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def _parse_float(text):
    text = text.strip()
    return float("nan") if text == "" else float(text)


def _format_meta(value):
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(format_float(v) if isinstance(v, (float, np.floating)) else str(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def _write(path, meta, header, rows):
    path = Path(path)
    buf = _io.StringIO()
    for key, value in (meta or {}).items():
        buf.write(f"# {key}: {_format_meta(value)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def _read(path):
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise ValueError(f"{path}: no header row")
    return meta, rows[0], rows[1:]


def write_points(path, points, values=None, meta=None, value_name="value"):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[1]
    header = [f"x{i + 1}" for i in range(n)]
    meta = {"dim": n, "count": points.shape[0], **(meta or {})}
    if values is not None:
        values = np.asarray(values, dtype=float).ravel()
        if values.size != points.shape[0]:
            raise ValueError("values and points differ in length")
        header.append(value_name)
        rows = ([format_float(c) for c in p] + [format_float(v)] for p, v in zip(points, values))
    else:
        rows = ([format_float(c) for c in p] for p in points)
    return _write(path, meta, header, rows)


def read_points(path):
    """Returns ``(points, values or None, meta)``."""
    meta, header, rows = _read(path)
    n = sum(1 for h in header if h.startswith("x"))
    data = np.array([[_parse_float(c) for c in r] for r in rows], dtype=float).reshape(len(rows), len(header))
    values = data[:, n] if len(header) > n else None
    return data[:, :n], values, meta


def _grid_meta(grid):
    return {
        "dim": grid.dim,
        "points_per_axis": grid.points_per_axis,
        "lower": list(map(float, grid.domain.lower)),
        "upper": list(map(float, grid.domain.upper)),
    }


def write_field(path, field, meta=None, value_name="value"):
    grid = field.grid
    header = [f"x{i + 1}" for i in range(grid.dim)] + [value_name]
    nodes = grid.nodes()
    rows = ([format_float(c) for c in p] + [format_float(v)] for p, v in zip(nodes, field.values))
    return _write(path, {**_grid_meta(grid), **(meta or {})}, header, rows)


def read_field(path):
    meta, header, rows = _read(path)
    try:
        dim = int(meta["dim"])
        npts = int(meta["points_per_axis"])
        lower = [float(v) for v in meta["lower"].split()]
        upper = [float(v) for v in meta["upper"].split()]
    except KeyError as exc:
        raise ValueError(f"{path}: missing grid metadata {exc}") from exc
    grid = GridSpec(Domain(tuple(lower), tuple(upper)), npts)
    values = np.array([_parse_float(r[dim]) for r in rows])
    if values.size != grid.size:
        raise ValueError(f"{path}: expected {grid.size} rows, found {values.size}")
    return DensityField(grid, values), meta


def write_checkpoint(path, params, meta=None):
    """Layer sizes on one row, then one parameter per row in flat order.

    Flat order is, per layer, the ``(out, in)`` weight matrix row-major
    followed by the bias vector.
    """
    meta = {"format": CHECKPOINT_MAGIC, **(meta or {})}
    rows = [["layer_sizes", *params.layer_sizes]]
    rows += [[format_float(v)] for v in params.flat]
    return _write(path, meta, ["field"], rows)


def read_checkpoint(path):
    meta, header, rows = _read(path)
    if meta.get("format") != CHECKPOINT_MAGIC or not rows or rows[0][0] != "layer_sizes":
        raise ValueError(f"{path}: not a network checkpoint")
    sizes = [int(s) for s in rows[0][1:]]
    flat = np.array([float(r[0]) for r in rows[1:]])
    return MlpParams(sizes, flat), meta


def write_history(path, history, meta=None):
    rows = ([str(i + 1), format_float(a), format_float(b)] for i, (a, b) in enumerate(history))
    return _write(path, meta, ["iter", "L1", "L2"], rows)


def read_history(path):
    _, _, rows = _read(path)
    return np.array([[_parse_float(r[1]), _parse_float(r[2])] for r in rows]).reshape(len(rows), 2)


def write_curve(path, pairs, names, meta=None):
    rows = ([format_float(v) for v in row] for row in pairs)
    return _write(path, meta, list(names), rows)


def read_curve(path):
    meta, header, rows = _read(path)
    return header, np.array([[_parse_float(c) for c in r] for r in rows]), meta
