"""Scaled dot-product attention kernels.

Three interchangeable single-head kernels share one contract
(``softmax(scale * q k^T + mask) v``):

* :func:`attention_naive` materializes the whole score matrix; it is the
  reference the other two are checked against.
* :func:`attention_slim` walks blocks of query rows. Each block's score rows
  span the full key length, so the softmax is exact and no rescaling is ever
  needed. One :class:`ScoreBuffer` of ``block_rows x Lk`` floats is reused for
  every block.
* :func:`attention_flash` tiles both queries and keys and keeps running
  row max / row sum statistics, rescaling the partial output after every key
  tile (online softmax).

:func:`attention_decode` is the single-query path over an INT8 cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, DimensionError, RangeError
from .tensor import F32, QuantRowsI8, _ordered_dot, as_tensor, matmul, matmul_hybrid, softmax_rows

# Masked scores are set (not added) to this value; exp() of it minus any real
# row max underflows to exactly 0.
MASK_VALUE = F32(np.finfo(np.float32).min)


@dataclass(frozen=True)
class AttentionParams:
    head_size: int
    n_head: int = 1
    n_kv_head: int = 1
    causal: bool = False
    scale: float | None = None
    slim_block_rows: int = 64
    flash_tile_q: int = 64
    flash_tile_k: int = 64

    def __post_init__(self):
        if min(self.head_size, self.n_head, self.n_kv_head) < 1:
            raise ConfigError("head_size, n_head and n_kv_head must be >= 1")
        if self.n_head % self.n_kv_head:
            raise ConfigError(f"n_head={self.n_head} is not a multiple of n_kv_head={self.n_kv_head}")
        if self.slim_block_rows < 1 or self.flash_tile_q < 1 or self.flash_tile_k < 1:
            raise ConfigError("block and tile sizes must be >= 1")

    @property
    def softmax_scale(self) -> F32:
        return F32(self.scale if self.scale is not None else 1.0 / math.sqrt(self.head_size))

    @property
    def group_size(self) -> int:
        return self.n_head // self.n_kv_head


class ScoreBuffer:
    """Reusable scratch for one SlimAttention lane.

    The backing store is allocated once; ``allocations`` counts how many
    times that happened and is the hook tests use to prove that the hot
    loop never reallocates.
    """

    def __init__(self, rows: int, cols: int):
        if rows < 1 or cols < 1:
            raise ConfigError(f"ScoreBuffer needs rows, cols >= 1, got {rows}x{cols}")
        self.rows = rows
        self.cols = cols
        self.data = np.empty(rows * cols, dtype=F32)
        self.allocations = 1
        self.views = 0

    def view(self, rows: int, cols: int) -> np.ndarray:
        # contiguous, so row reductions see the same memory layout as a fresh array
        if rows > self.rows or cols > self.cols:
            raise CapacityError(
                f"score buffer {self.rows}x{self.cols} cannot hold a {rows}x{cols} block"
            )
        self.views += 1
        return self.data[: rows * cols].reshape(rows, cols)

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


def _check_qkv(q, k, v, p: AttentionParams):
    q = as_tensor(q, 2, "q")
    k = as_tensor(k, 2, "k")
    v = as_tensor(v, 2, "v")
    d = p.head_size
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise DimensionError(f"head_size {d} does not match q{q.shape} k{k.shape} v{v.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k{k.shape} and v{v.shape} disagree on sequence length")
    if k.shape[0] < 1:
        raise DimensionError("attention needs at least one key")
    if p.causal and q.shape[0] > k.shape[0]:
        raise DimensionError(f"causal attention needs Lq <= Lk, got q{q.shape} k{k.shape}")
    return q, k, v


def _mask_rows(s: np.ndarray, first_row: int, offset: int, col0: int = 0) -> None:
    # query row i sees key positions <= offset + i
    for r in range(s.shape[0]):
        start = offset + first_row + r + 1 - col0
        if start < s.shape[1]:
            s[r, max(start, 0) :] = MASK_VALUE


def attention_naive(q, k, v, p: AttentionParams) -> np.ndarray:
    q, k, v = _check_qkv(q, k, v, p)
    s = matmul(q, k, transpose_b=True)
    s *= p.softmax_scale
    if p.causal:
        _mask_rows(s, 0, k.shape[0] - q.shape[0])
    return matmul(softmax_rows(s), v)


def attention_slim(q, k, v, p: AttentionParams, buf: ScoreBuffer | None = None) -> np.ndarray:
    q, k, v = _check_qkv(q, k, v, p)
    lq, lk = q.shape[0], k.shape[0]
    if buf is None:
        buf = ScoreBuffer(p.slim_block_rows, lk)
    if buf.rows < min(p.slim_block_rows, lq) or buf.cols < lk:
        raise CapacityError(
            f"score buffer {buf.rows}x{buf.cols} too small for block {p.slim_block_rows}x{lk}"
        )
    offset = lk - lq
    scale = p.softmax_scale
    out = np.empty((lq, p.head_size), dtype=F32)
    for i0 in range(0, lq, p.slim_block_rows):
        i1 = min(lq, i0 + p.slim_block_rows)
        # columns past the block's last visible key are masked for every row
        width = min(lk, offset + i1) if p.causal else lk
        s = buf.view(i1 - i0, width)
        matmul(q[i0:i1], k[:width], transpose_b=True, out=s)
        s *= scale
        if p.causal:
            _mask_rows(s, i0, offset)
        softmax_rows(s, out=s)
        matmul(s, v[:width], out=out[i0:i1])
    return out


def attention_flash(q, k, v, p: AttentionParams) -> np.ndarray:
    q, k, v = _check_qkv(q, k, v, p)
    lq, lk = q.shape[0], k.shape[0]
    offset = lk - lq
    scale = p.softmax_scale
    tq, tk = p.flash_tile_q, p.flash_tile_k
    out = np.empty((lq, p.head_size), dtype=F32)
    s_buf = np.empty(min(tq, lq) * min(tk, lk), dtype=F32)
    pv = np.empty((min(tq, lq), p.head_size), dtype=F32)
    for i0 in range(0, lq, tq):
        i1 = min(lq, i0 + tq)
        rows = i1 - i0
        row_max = np.full(rows, -np.inf, dtype=F32)
        row_sum = np.zeros(rows, dtype=F32)
        acc = np.zeros((rows, p.head_size), dtype=F32)
        for j0 in range(0, lk, tk):
            if p.causal and j0 > offset + i1 - 1:
                break
            j1 = min(lk, j0 + tk)
            s = s_buf[: rows * (j1 - j0)].reshape(rows, j1 - j0)
            # shapes were validated above; call the ordered kernel directly per tile
            _ordered_dot(q[i0:i1], k[j0:j1].T, s)
            s *= scale
            if p.causal and j1 - 1 > offset + i0:
                _mask_rows(s, i0, offset, col0=j0)
            new_max = np.maximum(row_max, s.max(axis=1))
            correction = np.exp(row_max - new_max)
            s -= new_max[:, None]
            np.exp(s, out=s)
            row_sum *= correction
            row_sum += s.sum(axis=1)
            acc *= correction[:, None]
            _ordered_dot(s, v[j0:j1], pv[:rows])
            acc += pv[:rows]
            row_max = new_max
        out[i0:i1] = acc / row_sum[:, None]
    return out


def scratch_floats(p: AttentionParams, lq: int, lk: int) -> dict[str, int]:
    """Score scratch in f32 elements: the slim row buffer vs. the flash tile plus running max/sum.

    Output accumulators are excluded; both kernels need one per query row.
    """
    slim = min(p.slim_block_rows, lq) * lk
    tq = min(p.flash_tile_q, lq)
    flash = tq * min(p.flash_tile_k, lk) + 2 * tq
    return {"slim": slim, "flash": flash}


def attention_decode(q_one, cache_k: QuantRowsI8, cache_v: QuantRowsI8, p: AttentionParams, t: int) -> np.ndarray:
    """One query row against the first ``t`` rows of an INT8 K/V head store."""
    q_one = as_tensor(q_one, 2, "q_one")
    if q_one.shape[1] != p.head_size or cache_k.cols != p.head_size or cache_v.cols != p.head_size:
        raise DimensionError(
            f"head_size {p.head_size} does not match q{q_one.shape} k{cache_k.shape} v{cache_v.shape}"
        )
    if t < 1 or t > cache_k.rows or t > cache_v.rows:
        raise RangeError(f"t={t} outside cached rows (k={cache_k.rows}, v={cache_v.rows})")
    s = matmul_hybrid(q_one, cache_k[:t])
    s *= p.softmax_scale
    softmax_rows(s, out=s)
    return matmul_hybrid(s, cache_v[:t], transpose=False)


KERNELS = {
    "naive": attention_naive,
    "slim": attention_slim,
    "flash": attention_flash,
}


def multihead_attention(q, k, v, p: AttentionParams, kernel: str = "naive", buf: ScoreBuffer | None = None) -> np.ndarray:
    """Split heads, run ``kernel`` per head (GQA-aware), concatenate."""
    q = as_tensor(q, 2, "q")
    k = as_tensor(k, 2, "k")
    v = as_tensor(v, 2, "v")
    d = p.head_size
    if q.shape[1] != p.n_head * d:
        raise DimensionError(f"q hidden {q.shape[1]} != n_head*head_size {p.n_head * d}")
    if k.shape[1] != p.n_kv_head * d or v.shape[1] != p.n_kv_head * d:
        raise DimensionError(f"kv hidden k{k.shape} v{v.shape} != n_kv_head*head_size {p.n_kv_head * d}")
    try:
        fn = KERNELS[kernel]
    except KeyError:
        raise ConfigError(f"unknown attention kernel {kernel!r}") from None
    if kernel == "slim" and buf is None:
        buf = ScoreBuffer(min(p.slim_block_rows, q.shape[0]), k.shape[0])
    out = np.empty((q.shape[0], p.n_head * d), dtype=F32)
    for h in range(p.n_head):
        g = h // p.group_size
        args = (q[:, h * d : (h + 1) * d], k[:, g * d : (g + 1) * d], v[:, g * d : (g + 1) * d], p)
        out[:, h * d : (h + 1) * d] = fn(*args, buf) if kernel == "slim" else fn(*args)
    return out
