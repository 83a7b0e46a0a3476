"""Plain-text matrix files.

Each matrix is a header line ``rows cols`` followed by ``rows`` lines of
whitespace-separated values written with 17 significant digits, which makes
float64 round trips exact. A file may hold several matrices back to back.
"""

from __future__ import annotations

import io
from typing import Iterable, TextIO

import numpy as np


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_matrix(f: TextIO, M) -> None:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {M.shape}")
    f.write(f"{M.shape[0]} {M.shape[1]}\n")
    for row in M:
        f.write(" ".join(_fmt(x) for x in row) + "\n")


def read_matrix(f: TextIO) -> np.ndarray | None:
    """Read the next matrix, or ``None`` at end of file."""
    line = f.readline()
    while line and not line.strip():
        line = f.readline()
    if not line:
        return None
    try:
        rows, cols = (int(t) for t in line.split())
    except ValueError:
        raise ValueError(f"bad matrix header: {line!r}") from None
    out = np.empty((rows, cols))
    for i in range(rows):
        vals = f.readline().split()
        if len(vals) != cols:
            raise ValueError(f"row {i}: expected {cols} values, got {len(vals)}")
        out[i] = [float(v) for v in vals]
    return out


def save_matrices(path, matrices: Iterable) -> None:
    with open(path, "w") as f:
        for M in matrices:
            write_matrix(f, M)


def load_matrices(path) -> list[np.ndarray]:
    out = []
    with open(path) as f:
        while (M := read_matrix(f)) is not None:
            out.append(M)
    return out


def save_matrix(path, M) -> None:
    save_matrices(path, [M])


def load_matrix(path) -> np.ndarray:
    mats = load_matrices(path)
    if len(mats) != 1:
        raise ValueError(f"{path}: expected one matrix, found {len(mats)}")
    return mats[0]


def dumps(M) -> str:
    buf = io.StringIO()
    write_matrix(buf, M)
    return buf.getvalue()


def loads(text: str) -> np.ndarray:
    return read_matrix(io.StringIO(text))


__all__ = ["save_matrix", "load_matrix", "save_matrices", "load_matrices",
           "write_matrix", "read_matrix", "dumps", "loads"]
