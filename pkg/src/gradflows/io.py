"""CSV and JSON writers with fixed formatting for byte-reproducible output."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .density import Grid, GridDensity


def fmt(value) -> str:
    """17 significant digits; empty string for ``None``."""
    if value is None:
        return ""
    return format(float(value), ".17g")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
    return header, data


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def write_json(path, payload) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def write_density(stem, rho: GridDensity) -> tuple[Path, Path]:
    """Write ``stem.csv`` (node coordinates, value) and ``stem.json`` (bounds, nodes, mass)."""
    stem = Path(stem)
    grid = rho.grid
    names = [f"x_{k + 1}" for k in range(grid.dim)] + ["value"]
    pts = grid.points.reshape(-1, grid.dim)
    rows = np.column_stack([pts, rho.values.reshape(-1)])
    csv = write_csv(stem.with_suffix(".csv"), names, rows)
    meta = write_json(stem.with_suffix(".json"), {
        "lower": list(grid.lower), "upper": list(grid.upper),
        "nodes": list(grid.nodes), "mass": rho.mass})
    return csv, meta


def read_density(stem) -> GridDensity:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    grid = Grid(meta["lower"], meta["upper"], meta["nodes"])
    _, data = read_csv(stem.with_suffix(".csv"))
    return GridDensity(grid, data[:, -1].reshape(grid.shape))
