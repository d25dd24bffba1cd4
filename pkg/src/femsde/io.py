"""CSV and JSON readers/writers shared by the library and the CLI.

Floats are written with 17 significant digits so files round-trip
losslessly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .likelihood import UniformTimeSeries

__all__ = [
    "write_columns",
    "read_columns",
    "write_dataset",
    "read_dataset",
    "write_gamma",
    "read_gamma",
    "write_series",
    "write_json",
    "read_json",
]

_AUX_NAMES = ("u", "v", "w")


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_columns(path, header, columns) -> None:
    cols = [np.asarray(c, dtype=float) for c in columns]
    n = cols[0].size
    if any(c.size != n for c in cols):
        raise ValueError("columns differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def read_columns(path) -> tuple[list[str], np.ndarray]:
    """Header and ``(n_columns, n_rows)`` float array."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row] for row in r if row], dtype=float)
    if data.size == 0:
        data = np.empty((0, len(header)))
    return header, data.T


def _check_grid(t) -> tuple[float, float]:
    if t.size < 2:
        raise ValueError("a series needs at least two rows")
    dt = (t[-1] - t[0]) / (t.size - 1)
    if not np.allclose(np.diff(t), dt, rtol=1e-6, atol=1e-12):
        raise ValueError("time column is not equally spaced")
    return float(t[0]), float(dt)


def write_series(path, series: UniformTimeSeries, name: str = "x") -> None:
    write_columns(path, ["t", name], [series.times, series.values])


def write_dataset(path, x: UniformTimeSeries, aux=(), sidecar: dict | None = None) -> Path:
    """Write ``t,x,u[,v]`` and, if given, a JSON sidecar next to it."""
    path = Path(path)
    aux = list(aux)
    header = ["t", "x"] + list(_AUX_NAMES[: len(aux)])
    write_columns(path, header, [x.times, x.values] + [a.values for a in aux])
    if sidecar is not None:
        write_json(path.with_suffix(".json"), sidecar)
    return path


def read_dataset(path) -> tuple[UniformTimeSeries, list[UniformTimeSeries], dict | None]:
    path = Path(path)
    header, cols = read_columns(path)
    if header[:2] != ["t", "x"]:
        raise ValueError(f"{path}: expected header starting with t,x")
    t0, dt = _check_grid(cols[0])
    x = UniformTimeSeries(t0, dt, cols[1])
    aux = [UniformTimeSeries(t0, dt, c) for c in cols[2:]]
    side = path.with_suffix(".json")
    meta = read_json(side) if side.exists() else None
    return x, aux, meta


def write_gamma(path, t, gamma) -> None:
    gamma = np.atleast_2d(gamma)
    header = ["t"] + [f"gamma_{k + 1}" for k in range(gamma.shape[0])]
    write_columns(path, header, [t] + list(gamma))


def read_gamma(path) -> tuple[np.ndarray, np.ndarray]:
    header, cols = read_columns(path)
    if header[0] != "t" or not all(h.startswith("gamma_") for h in header[1:]):
        raise ValueError(f"{path}: not an affiliation file")
    return cols[0], cols[1:]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
