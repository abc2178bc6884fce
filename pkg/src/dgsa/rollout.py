"""Attention rollout and heatmap export (binary PGM and CSV).

Fused gated maps can be negative.  The rollout product runs on absolute
values, while the signed per-layer maps are exported untouched as a
positive-part / negative-part pair so inhibition stays visible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError, UsageError

RESIDUAL_MIX = 0.5


def head_average(maps: np.ndarray) -> np.ndarray:
    """Mean over the head axis of (h, N, N) maps."""
    maps = np.asarray(maps, dtype=float)
    if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
        raise DimensionError(f"expected (h, N, N) maps, got {maps.shape}")
    return maps.mean(axis=0)


def _row_normalize(a: np.ndarray) -> np.ndarray:
    """Rows scaled to sum 1; an all-zero row becomes the matching identity row."""
    sums = a.sum(axis=1, keepdims=True)
    eye = np.eye(len(a))
    zero = sums[:, 0] == 0
    out = a / np.where(sums == 0, 1.0, sums)
    out[zero] = eye[zero]
    return out


def mix_layer(a: np.ndarray) -> np.ndarray:
    """|A| row-normalised, mixed half-and-half with the identity, renormalised."""
    a = np.abs(np.asarray(a, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square map, got {a.shape}")
    mixed = RESIDUAL_MIX * _row_normalize(a) + (1.0 - RESIDUAL_MIX) * np.eye(len(a))
    return _row_normalize(mixed)


def rollout_accumulate(layer_maps) -> np.ndarray:
    """Product of mixed layer maps, later layers on the left: R = M_L ... M_1."""
    layer_maps = list(layer_maps)
    if not layer_maps:
        raise UsageError("rollout needs at least one layer")
    out = mix_layer(layer_maps[0])
    for a in layer_maps[1:]:
        out = mix_layer(a) @ out
    return out


# -- export ------------------------------------------------------------------

def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to 0..255 with round-half-up; a constant map becomes all 0."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.floor((v - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary P5 PGM, row-major, maxval 255."""
    grid = np.atleast_2d(np.asarray(values, dtype=float))
    rows, cols = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii") + to_gray(grid).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise UsageError(f"{path}: not an 8-bit P5 PGM")
    cols, rows = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + rows * cols], dtype=np.uint8).reshape(rows, cols)


def write_csv(path, values: np.ndarray) -> None:
    grid = np.atleast_2d(np.asarray(values, dtype=float))
    with open(path, "w", newline="\n") as fh:
        for row in grid:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_csv(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(x) for x in line.split(",")] for line in fh if line.strip()])


def export_heatmap(values, path, fmt: str = "pgm", signed: bool = False) -> list[Path]:
    """Write a map (N x N or N-vector) and return the files written.

    ``signed`` with ``fmt="pgm"`` writes ``<stem>_pos.pgm`` (max(A, 0)) and
    ``<stem>_neg.pgm`` (max(-A, 0)).  CSV always keeps the signed values.
    """
    path = Path(path)
    values = np.asarray(values, dtype=float)
    if fmt == "csv":
        write_csv(path, values)
        return [path]
    if fmt != "pgm":
        raise UsageError(f"unknown heatmap format {fmt!r}")
    if not signed:
        write_pgm(path, values)
        return [path]
    pos = path.with_name(f"{path.stem}_pos{path.suffix}")
    neg = path.with_name(f"{path.stem}_neg{path.suffix}")
    write_pgm(pos, np.maximum(values, 0.0))
    write_pgm(neg, np.maximum(-values, 0.0))
    return [pos, neg]
