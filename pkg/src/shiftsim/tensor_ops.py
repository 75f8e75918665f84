"""Deterministic float32 tensor kernels.

Every operation here is elementwise or an explicitly ordered reduction, so
results are bit-stable for a given input on a given platform regardless of
thread scheduling or library build flags.  Matrix products deliberately avoid
BLAS: the contraction axis is accumulated left to right in float32, one rank-1
update per step, which matches a naive triple loop bit for bit and keeps
partial-sum order independent of how callers shard their operands.

Weight initialisation uses SplitMix64, a tiny public-domain 64-bit mixer, so
byte-identical weights come out of any platform for the same seed.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericsError

Matrix = np.ndarray

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_WEIGHT_SCALE = np.float32(0.1)


def as_matrix(data) -> Matrix:
    """Coerce nested lists or an array to a C-contiguous float32 matrix."""
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if m.ndim != 2:
        raise ConfigError(f"expected a 2-d matrix, got ndim={m.ndim}")
    return m


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float32)


def _require_matrix(m: Matrix, name: str) -> None:
    if not isinstance(m, np.ndarray) or m.ndim != 2 or m.dtype != np.float32:
        raise ConfigError(f"{name} must be a 2-d float32 array")


def _require_finite(m: Matrix, op: str) -> Matrix:
    if not np.isfinite(m).all():
        raise NumericsError(f"{op} produced a non-finite value")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Product a @ b with a fixed left-to-right float32 accumulation order.

    Equivalent, bit for bit, to the scalar loop
    ``out[i, j] = ((a[i, 0]*b[0, j]) + a[i, 1]*b[1, j]) + ...`` because each
    rank-1 update multiplies then adds in float32 exactly once per k.
    """
    _require_matrix(a, "a")
    _require_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ConfigError(
            f"inner dimensions differ: {a.shape} @ {b.shape}"
        )
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        out += np.outer(a[:, k], b[k, :])
    return _require_finite(out, "matmul")


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction for stability.

    Each output row sums to 1 within 1e-6.  Inputs as negative as -1e30 are
    legal and underflow to an exact 0 contribution.
    """
    _require_matrix(m, "m")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return _require_finite(out.astype(np.float32, copy=False), "softmax_rows")


def _splitmix64(seed: int, count: int) -> np.ndarray:
    """First `count` outputs of SplitMix64 seeded with `seed`, as uint64."""
    base = np.uint64(seed & _MASK64)
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = base + idx * np.uint64(_SPLITMIX_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, label: str) -> int:
    """Stable per-tensor sub-seed from a root seed and a text label."""
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return (seed & _MASK64) ^ h


def init_weights(seed: int, shape: tuple[int, int]) -> Matrix:
    """Deterministic weight matrix with entries in [-0.1, 0.1].

    The top 24 bits of each SplitMix64 output select a float32-exact point in
    [0, 1); the affine map to [-0.1, 0.1] is done in float32.  Bytes are
    identical on every platform for the same (seed, shape).
    """
    rows, cols = shape
    if rows <= 0 or cols <= 0:
        raise ConfigError(f"weight shape must be positive, got {shape}")
    raw = _splitmix64(seed, rows * cols)
    unit = (raw >> np.uint64(40)).astype(np.float32) * np.float32(2.0**-24)
    vals = (unit * np.float32(2.0) - np.float32(1.0)) * _WEIGHT_SCALE
    return vals.reshape(rows, cols)


def split_cols(m: Matrix, parts: int) -> list[Matrix]:
    """Split into `parts` contiguous column blocks of equal width (copies)."""
    _require_matrix(m, "m")
    if parts <= 0 or m.shape[1] % parts != 0:
        raise ConfigError(f"cannot split {m.shape[1]} columns into {parts} parts")
    width = m.shape[1] // parts
    return [np.ascontiguousarray(m[:, i * width:(i + 1) * width]) for i in range(parts)]


def split_rows(m: Matrix, parts: int) -> list[Matrix]:
    """Split into `parts` contiguous row blocks of equal height (copies)."""
    _require_matrix(m, "m")
    if parts <= 0 or m.shape[0] % parts != 0:
        raise ConfigError(f"cannot split {m.shape[0]} rows into {parts} parts")
    height = m.shape[0] // parts
    return [np.ascontiguousarray(m[i * height:(i + 1) * height, :]) for i in range(parts)]


def concat_rows(mats: list[Matrix]) -> Matrix:
    return np.ascontiguousarray(np.vstack(mats))


def concat_cols(mats: list[Matrix]) -> Matrix:
    return np.ascontiguousarray(np.hstack(mats))
