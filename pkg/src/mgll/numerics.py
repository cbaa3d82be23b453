"""Dense float64 matrix primitives and numerically stable scalar kernels.

All public functions are pure and safe for concurrent use. Reductions run in
a fixed left-to-right order so results are bit-reproducible for a fixed input
order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyInput, ParseError, ZeroRow

# Row norms below this are indistinguishable from zero in float64.
ZERO_NORM_FLOOR = 1e-300


def as_float_array(x) -> np.ndarray:
    """Coerce to a floating ndarray, widening to float64 but never narrowing.

    Extended-precision inputs (longdouble) pass through untouched so the
    finite-difference oracle can drive the same code paths at higher precision.
    """
    a = np.asarray(x)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    elif a.dtype == np.float32 or a.dtype == np.float16:
        a = a.astype(np.float64)
    return a


def row_normalize(m) -> np.ndarray:
    """Scale every row to unit Euclidean norm.

    Raises ZeroRow if any row norm falls below 1e-300.
    """
    a = as_float_array(m)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d matrix, got ndim={a.ndim}")
    norms = np.sqrt((a * a).sum(axis=1))
    if np.any(norms < ZERO_NORM_FLOOR):
        bad = int(np.argmin(norms))
        raise ZeroRow(f"row {bad} has zero norm and cannot be normalized")
    return a / norms[:, None]


def similarity_matrix(a, b) -> np.ndarray:
    """Pairwise dot products: out[i, j] = a[i] . b[j].

    Inputs are expected to be row-normalized already; see
    cosine_similarity_matrix for the normalizing variant.
    """
    a = as_float_array(a)
    b = as_float_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionMismatch("similarity_matrix needs two 2-d matrices")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(
            f"column counts differ: {a.shape[1]} vs {b.shape[1]}"
        )
    return a @ b.T


def cosine_similarity_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities of raw (not necessarily unit) rows."""
    return similarity_matrix(row_normalize(a), row_normalize(b))


def stable_softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; invariant under adding a constant to all logits."""
    z = as_float_array(logits)
    if z.size == 0:
        raise EmptyInput("softmax of an empty logit vector")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_sum_exp(logits, axis=None):
    """Max-shifted log(sum(exp(logits))); no overflow for logits up to +-700."""
    z = as_float_array(logits)
    if z.size == 0:
        raise EmptyInput("log_sum_exp of an empty logit vector")
    m = z.max(axis=axis, keepdims=axis is not None)
    out = np.log(np.exp(z - m).sum(axis=axis, keepdims=axis is not None)) + m
    if axis is None:
        return float(out)
    return np.squeeze(out, axis=axis)


def log_sigmoid(x):
    """log(sigmoid(x)) computed as -softplus(-x); finite for all finite x."""
    x = as_float_array(x)
    return np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    """Overflow-safe logistic function."""
    x = as_float_array(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def compensated_sum(values) -> float:
    """Neumaier-compensated (improved Kahan) sum of a vector.

    Deterministic for a fixed input order; recovers cancellation cases like
    [1e16, 1, -1e16] -> 1.0 that plain accumulation loses.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    total = 0.0
    comp = 0.0
    for v in arr.tolist():
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


# --- MGEM binary matrix format ----------------------------------------------
#
# magic "MGEM", u8 version=1, u32le rows, u32le cols, then rows*cols f32le
# values in row-major order. Values are widened to float64 on load.

MGEM_MAGIC = b"MGEM"
MGEM_VERSION = 1
_MGEM_HEADER = struct.Struct("<4sBII")


def write_mgem(path, matrix) -> None:
    """Write a matrix to disk in the MGEM interchange format (float32)."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch("MGEM files hold 2-d matrices")
    payload = a.astype("<f4").tobytes(order="C")
    header = _MGEM_HEADER.pack(MGEM_MAGIC, MGEM_VERSION, a.shape[0], a.shape[1])
    Path(path).write_bytes(header + payload)


def read_mgem(path) -> np.ndarray:
    """Load an MGEM file, widening the float32 payload to float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _MGEM_HEADER.size:
        raise ParseError(f"{path}: truncated MGEM header")
    magic, version, rows, cols = _MGEM_HEADER.unpack_from(raw)
    if magic != MGEM_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != MGEM_VERSION:
        raise ParseError(f"{path}: unsupported MGEM version {version}")
    expected = _MGEM_HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise ParseError(
            f"{path}: payload length {len(raw)} does not match {rows}x{cols}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_MGEM_HEADER.size)
    return data.astype(np.float64).reshape(rows, cols)
