"""Shared numeric primitives: array validation, cosine similarity, stable
log-sum-exp, and seeded random number generation.

Everything is carried in 64-bit floats. Vectors and matrices are plain numpy
arrays; ``as_vector`` / ``as_matrix`` are the single entry points through
which outside data becomes one. Randomness always flows through a
``numpy.random.Generator`` created by ``make_rng`` so that equal seeds give
bit-identical draw sequences.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_vector",
    "as_matrix",
    "make_rng",
    "draw_standard_normal",
    "cosine_similarity",
    "l2_normalize",
    "log_sum_exp",
]


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Validate and return *values* as a finite 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_matrix(values, rows: int | None = None, cols: int | None = None,
              name: str = "matrix") -> np.ndarray:
    """Validate and return *values* as a finite 2-D float64 array.

    ``rows`` / ``cols`` pin the expected shape when given.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator seeded with *seed*.

    Equal seeds produce bit-identical streams; every stochastic component of
    the library draws from a generator built here.
    """
    return np.random.Generator(np.random.PCG64(seed))


def draw_standard_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. standard normal values from *rng*."""
    if n <= 0:
        raise ValueError(f"draw count must be positive, got {n}")
    return rng.standard_normal(n)


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two equal-length vectors, clamped to [-1, 1].

    The clamp guards against rounding pushing the ratio marginally outside
    the valid range for collinear inputs.
    """
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate vector: zero norm")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def l2_normalize(a) -> np.ndarray:
    """Return *a* scaled to unit Euclidean norm."""
    va = as_vector(a, "a")
    norm = np.linalg.norm(va)
    if norm == 0.0:
        raise ValueError("degenerate vector: zero norm")
    return va / norm


def log_sum_exp(values, axis: int | None = None):
    """log(sum(exp(values))) computed with a max shift.

    Finite whenever the largest entry is finite, no matter how negative the
    inputs are. With ``axis=None`` a float is returned, otherwise an array
    reduced along ``axis``.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("log_sum_exp of empty input")
    m = np.max(arr, axis=axis, keepdims=True)
    # exp(-inf - -inf) would give nan; all--inf slices must come out as -inf.
    shifted = np.where(np.isneginf(m), 0.0, arr - m)
    total = m + np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    if axis is None:
        return float(total)
    return np.squeeze(total, axis=axis)
