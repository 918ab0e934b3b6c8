from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from aglp._errors import ConfigurationError


def format_value(value) -> str:
    """Shortest repr that round-trips, so rewritten files stay byte-identical."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])


def append_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Append rows, writing the header first if the file is new."""
    new_file = not path.is_file()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new_file:
            writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader)
            return header, list(reader)
    except (OSError, StopIteration) as error:
        raise ConfigurationError(f"cannot read {path}: {error}") from error


def truncate_csv(path: Path, keep) -> None:
    """Rewrite ``path`` keeping the header and only the rows where ``keep(row)`` holds."""
    if not path.is_file():
        return
    header, rows = read_csv(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(row for row in rows if keep(row))


def write_arrays(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """One row per array: name, rows, cols, then the values in row-major order."""
    rows = []
    for name, array in arrays.items():
        matrix = np.atleast_2d(array)
        rows.append([name, matrix.shape[0], matrix.shape[1], *matrix.ravel().tolist()])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        for row in rows:
            writer.writerow([format_value(value) for value in row])


def read_arrays(path: Path) -> dict[str, np.ndarray]:
    arrays = {}
    try:
        with open(path, newline="", encoding="utf-8") as f:
            for name, n_rows, n_cols, *values in csv.reader(f):
                shape = (int(n_rows), int(n_cols))
                arrays[name] = np.array([float(v) for v in values]).reshape(shape)
    except OSError as error:
        raise ConfigurationError(f"cannot read {path}: {error}") from error
    return arrays
