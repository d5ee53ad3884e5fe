"""Dense f32 kernels with a fixed accumulation order.

Tensors are plain ``numpy`` float32 arrays (row-major). Every matmul here
accumulates its inner dimension strictly left to right, one rounded f32
product at a time, so results are bit-reproducible and can be compared for
exact equality against a scalar triple loop. BLAS (``np.matmul``) is never
used because its summation order is unspecified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

F32 = np.float32

# Upper bound on the number of f32 partial products materialized per chunk.
_CHUNK_ELEMS = 1 << 21


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=F32)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim}-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class QuantRowsI8:
    """INT8 rows with one symmetric f32 scale per row.

    ``values`` may be a strided view into a larger store (the KV cache hands
    out per-head views this way), so nothing here assumes contiguity.
    """

    values: np.ndarray  # int8, rows x cols
    scales: np.ndarray  # f32, rows

    def __post_init__(self):
        if self.values.dtype != np.int8 or self.values.ndim != 2:
            raise DimensionError(f"values must be 2-D int8, got {self.values.dtype} {self.values.shape}")
        if self.scales.dtype != F32 or self.scales.shape != (self.values.shape[0],):
            raise DimensionError(
                f"scales shape {self.scales.shape} does not match values rows {self.values.shape[0]}"
            )

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __getitem__(self, rows: slice) -> "QuantRowsI8":
        if not isinstance(rows, slice):
            raise TypeError("QuantRowsI8 supports row slices only")
        return QuantRowsI8(self.values[rows], self.scales[rows])


def matmul(a, b, transpose_b: bool = False, out: np.ndarray | None = None) -> np.ndarray:
    """``a @ b`` (or ``a @ b.T``) with left-to-right f32 accumulation.

    ``c[i, j] = (((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...)`` where every
    product and every partial sum is rounded to f32.
    """
    a = as_tensor(a, 2, "matmul a")
    b = as_tensor(b, 2, "matmul b")
    bt = b.T if transpose_b else b
    if a.shape[1] != bt.shape[0]:
        op = "b^T" if transpose_b else "b"
        raise DimensionError(f"matmul: a{a.shape} incompatible with {op}{b.shape}")
    m, k = a.shape
    n = bt.shape[1]
    if out is None:
        out = np.empty((m, n), dtype=F32)
    elif out.shape != (m, n) or out.dtype != F32:
        raise DimensionError(f"matmul: out{out.shape} should be {(m, n)} f32")
    _ordered_dot(a, bt, out)
    return out


def _ordered_dot(a: np.ndarray, bt: np.ndarray, out: np.ndarray) -> None:
    # a: (m, k) f32, bt: (k, n) f32. add.accumulate is sequential by definition.
    m, k = a.shape
    n = bt.shape[1]
    if k == 0 or m == 0 or n == 0:
        out[...] = 0.0
        return
    rows = max(1, _CHUNK_ELEMS // (k * n))
    for r0 in range(0, m, rows):
        blk = a[r0 : r0 + rows]
        prod = blk[:, :, None] * bt[None, :, :]
        np.add.accumulate(prod, axis=1, out=prod)
        out[r0 : r0 + rows] = prod[:, -1, :]


def softmax_rows(x, out: np.ndarray | None = None) -> np.ndarray:
    """Numerically stable row softmax (max subtraction). May run in place via ``out=x``."""
    x = as_tensor(x, 2, "softmax input")
    if x.size == 0:
        raise DimensionError(f"softmax_rows: empty tensor {x.shape}")
    if out is None:
        out = np.empty_like(x)
    row_max = x.max(axis=1, keepdims=True)
    np.subtract(x, row_max, out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)
    return out


def quantize_rows_i8(x) -> QuantRowsI8:
    """Symmetric absmax INT8 quantization, one scale per row.

    ``scale = absmax / 127`` (in f32); values are round-half-even of
    ``x / scale`` clamped to [-127, 127]. An all-zero row gets scale 1.0.
    """
    x = as_tensor(x, 2, "quantize input")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"quantize_rows_i8: need r >= 1 and c >= 1, got {x.shape}")
    absmax = np.abs(x).max(axis=1)
    scales = absmax / F32(127.0)
    scales[absmax == 0] = 1.0
    # quotient in f64 so that rounding picks the true nearest integer
    q = np.rint(x.astype(np.float64) / scales.astype(np.float64)[:, None])
    values = np.clip(q, -127, 127).astype(np.int8)
    return QuantRowsI8(values, scales.astype(F32))


def dequantize(q: QuantRowsI8) -> np.ndarray:
    return q.values.astype(F32) * q.scales[:, None]


def matmul_hybrid(a, q: QuantRowsI8, transpose: bool = True, out: np.ndarray | None = None) -> np.ndarray:
    """Matmul with an INT8 operand converted to f32 inside the kernel.

    With ``transpose=True`` (the default) computes ``a @ dequantize(q).T``;
    this is the score path ``q . k^T``. With ``transpose=False`` computes
    ``a @ dequantize(q)``, the weighted-value path ``p . V``.

    The int8 operand is widened and scaled one reduction slice at a time,
    never materialized whole, then fed through the same ordered
    accumulation as :func:`matmul`, so the result is bit-identical to
    ``matmul(a, dequantize(q), transpose_b=transpose)``.
    """
    a = as_tensor(a, 2, "matmul_hybrid a")
    if transpose:
        if a.shape[1] != q.cols:
            raise DimensionError(f"matmul_hybrid: a{a.shape} incompatible with q^T{q.shape}")
        m, k, n = a.shape[0], q.cols, q.rows
    else:
        if a.shape[1] != q.rows:
            raise DimensionError(f"matmul_hybrid: a{a.shape} incompatible with q{q.shape}")
        m, k, n = a.shape[0], q.rows, q.cols
    if out is None:
        out = np.empty((m, n), dtype=F32)
    if k == 0 or m == 0 or n == 0:
        out[...] = 0.0
        return out

    # reduction slices of the int8 operand, widened per chunk
    step = max(1, _CHUNK_ELEMS // max(1, n * max(m, 1)))
    acc = None
    for t0 in range(0, k, step):
        t1 = min(k, t0 + step)
        if transpose:
            slab = q.values[:, t0:t1].T.astype(F32) * q.scales[None, :]  # (t, n)
        else:
            slab = q.values[t0:t1].astype(F32) * q.scales[t0:t1, None]  # (t, n)
        prod = a[:, t0:t1, None] * slab[None, :, :]
        if acc is not None:
            prod[:, 0, :] += acc
        np.add.accumulate(prod, axis=1, out=prod)
        acc = prod[:, -1, :].copy()
    out[...] = acc
    return out
