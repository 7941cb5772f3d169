"""Flat CSV files with a one-line header, written and read back losslessly."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "" if value is None else str(value)


def write_table(path, header, rows) -> Path:
    """Write ``rows`` under ``header``; floats use the shortest round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def write_columns(path, columns: dict) -> Path:
    """Write equal-length 1-D columns keyed by header name."""
    names = list(columns)
    arrays = [np.asarray(columns[n]).ravel() for n in names]
    if len({len(a) for a in arrays}) > 1:
        raise ValueError("columns must have equal length")
    return write_table(path, names, zip(*arrays))


def read_columns(path, required=()) -> dict[str, np.ndarray]:
    """Read a numeric CSV into ``{name: float array}``.

    Raises:
        OSError: the file cannot be opened.
        ValueError: a required column is missing or a cell is not numeric.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    missing = [c for c in required if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=float).reshape(len(rows), len(header))
    except ValueError as err:
        raise ValueError(f"{path}: {err}") from None
    return {name: data[:, i] for i, name in enumerate(header)}
