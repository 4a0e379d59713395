"""Dense float64 matrix helpers shared by the rest of the package.

A "matrix" everywhere in this package is a plain 2-D numpy array of
float64 in row-major (C) order.  The helpers here add the shape
validation the higher layers rely on: every mismatch raises ShapeError
naming both shapes instead of whatever numpy would have said.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "make_rng",
    "as_matrix",
    "matmul",
    "transpose",
    "hadamard",
    "split",
    "concat",
    "sum_all",
    "max_abs",
]

_AXES = {"rows": 0, "cols": 1}


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator pinned to the PCG64 bit generator.

    The same seed yields the same stream on every platform, which the
    key generation, batching and verification probes all depend on.
    """
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(a) -> np.ndarray:
    """Coerce to a 2-D float64 C-order array, rejecting anything else."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={out.ndim}")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    return a * b


def split(a: np.ndarray, axis: str, n_shards: int) -> list[np.ndarray]:
    """Cut into n_shards contiguous blocks along "rows" or "cols".

    Block sizes differ by at most one; the remainder goes to the first
    shards (the convention the partition planner and the backward-pass
    delta splitting must share).
    """
    ax = _AXES[axis]
    if n_shards < 1:
        raise ShapeError(f"split: n_shards must be >= 1, got {n_shards}")
    if n_shards > a.shape[ax]:
        raise ShapeError(
            f"split: {n_shards} shards exceed {axis}={a.shape[ax]} of {a.shape}"
        )
    return [np.ascontiguousarray(part) for part in np.array_split(a, n_shards, axis=ax)]


def concat(parts: list[np.ndarray], axis: str) -> np.ndarray:
    if not parts:
        raise ShapeError("concat: no parts given")
    ax = _AXES[axis]
    other = 1 - ax
    first = parts[0].shape[other]
    for part in parts[1:]:
        if part.shape[other] != first:
            raise ShapeError(
                f"concat: off-axis sizes differ, {parts[0].shape} vs {part.shape}"
            )
    return np.concatenate(parts, axis=ax)


def sum_all(parts: list[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("sum_all: no parts given")
    acc = parts[0].copy()
    for part in parts[1:]:
        if part.shape != acc.shape:
            raise ShapeError(f"sum_all: shapes differ, {acc.shape} vs {part.shape}")
        acc += part
    return acc


def max_abs(a: np.ndarray) -> float:
    return float(np.max(np.abs(a)))
