import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import attention_f64, rand
from cpullm.attention import (
    AttentionParams,
    ScoreBuffer,
    attention_decode,
    attention_flash,
    attention_naive,
    attention_slim,
    multihead_attention,
    scratch_floats,
)
from cpullm.errors import CapacityError, ConfigError, DimensionError, RangeError
from cpullm.tensor import dequantize, quantize_rows_i8


def qkv(seed, lq, lk, d, scale=1.0):
    rng = np.random.default_rng(seed)
    return rand(rng, lq, d, scale=scale), rand(rng, lk, d, scale=scale), rand(rng, lk, d)


def test_single_token_returns_v():
    q, k, v = qkv(0, 1, 1, 8)
    assert np.allclose(attention_naive(q, k, v, AttentionParams(8)), v, atol=0)


def test_orthogonal_query_gives_mean_of_v():
    k = np.eye(4, dtype=np.float32)[1:]
    q = np.array([[1, 0, 0, 0]], np.float32)
    v = rand(np.random.default_rng(1), 3, 4)
    out = attention_naive(q, k, v, AttentionParams(4))
    assert np.allclose(out, v.mean(axis=0, keepdims=True), atol=1e-7)


@pytest.mark.parametrize("causal", [False, True])
def test_naive_matches_f64_seed5(causal):
    q, k, v = qkv(5, 4, 6, 8)
    out = attention_naive(q, k, v, AttentionParams(8, causal=causal))
    assert np.abs(out - attention_f64(q, k, v, causal)).max() <= 1e-6


def test_slim_single_block_is_bit_identical():
    q, k, v = qkv(3, 10, 10, 8)
    for causal in (False, True):
        p = AttentionParams(8, causal=causal, slim_block_rows=10)
        assert np.array_equal(attention_slim(q, k, v, p), attention_naive(q, k, v, p))


def test_slim_block_one_seed9():
    q, k, v = qkv(9, 8, 8, 8)
    p = AttentionParams(8, slim_block_rows=1)
    assert np.abs(attention_slim(q, k, v, p) - attention_naive(q, k, v, p)).max() <= 1e-5


def test_causal_mask_independence_seed2():
    q, k, v = qkv(2, 4, 4, 8)
    p = AttentionParams(8, causal=True, slim_block_rows=2, flash_tile_q=2, flash_tile_k=2)
    for kernel in (attention_naive, attention_slim, attention_flash):
        base = kernel(q, k, v, p)
        for i in range(4):
            k2, v2 = k.copy(), v.copy()
            k2[i + 1 :] += 50.0
            v2[i + 1 :] = -1e3
            assert np.abs(kernel(q, k2, v2, p)[i] - base[i]).max() <= 1e-7


def test_flash_single_tile():
    q, k, v = qkv(4, 12, 12, 8)
    p = AttentionParams(8, flash_tile_q=12, flash_tile_k=12)
    assert np.abs(attention_flash(q, k, v, p) - attention_naive(q, k, v, p)).max() <= 1e-6


def test_flash_tile_k_one_seed13():
    q, k, v = qkv(13, 8, 8, 8)
    p = AttentionParams(8, flash_tile_q=3, flash_tile_k=1)
    assert np.abs(attention_flash(q, k, v, p) - attention_naive(q, k, v, p)).max() <= 1e-4


def test_flash_wide_score_range():
    q, k, v = qkv(14, 16, 16, 8)
    q *= 40.0 / np.abs(q @ k.T / np.sqrt(8)).max()
    p = AttentionParams(8, flash_tile_q=4, flash_tile_k=4)
    scores = (q @ k.T) / np.sqrt(8)
    assert scores.max() > 39 and scores.min() < -20
    out = attention_flash(q, k, v, p)
    assert np.all(np.isfinite(out))
    assert np.abs(out - attention_naive(q, k, v, p)).max() <= 1e-4


def test_slim_buffer_too_small():
    q, k, v = qkv(0, 4, 8, 4)
    with pytest.raises(CapacityError):
        attention_slim(q, k, v, AttentionParams(4, slim_block_rows=2), ScoreBuffer(2, 7))


def test_slim_reuses_one_buffer():
    q, k, v = qkv(6, 32, 32, 8)
    buf = ScoreBuffer(4, 32)
    p = AttentionParams(8, causal=True, slim_block_rows=4)
    attention_slim(q, k, v, p, buf)
    attention_slim(q, k, v, p, buf)
    assert buf.allocations == 1
    assert buf.views == 16


def test_slim_peak_memory_does_not_grow_with_blocks():
    # temporaries per block are released, so extra blocks cost only output rows
    def peak(lq):
        q, k, v = qkv(7, lq, 64, 8)
        buf = ScoreBuffer(4, 64)
        p = AttentionParams(8, slim_block_rows=4)
        attention_slim(q[:4], k, v, p, buf)
        tracemalloc.start()
        attention_slim(q, k, v, p, buf)
        _, top = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        return top - lq * 8 * 4

    assert peak(64) <= peak(8) + 1024


def test_scratch_sizes():
    p = AttentionParams(8, slim_block_rows=4, flash_tile_q=16, flash_tile_k=32)
    assert scratch_floats(p, 128, 128) == {"slim": 4 * 128, "flash": 16 * 32 + 2 * 16}


def test_bad_shapes():
    q, k, v = qkv(0, 4, 4, 8)
    with pytest.raises(DimensionError):
        attention_naive(q, k, v, AttentionParams(4))
    with pytest.raises(DimensionError):
        attention_naive(q, k[:3], v, AttentionParams(8))
    with pytest.raises(DimensionError):
        attention_naive(rand(np.random.default_rng(0), 5, 8), k, v, AttentionParams(8, causal=True))


def test_params_validation():
    with pytest.raises(ConfigError):
        AttentionParams(8, n_head=4, n_kv_head=3)
    with pytest.raises(ConfigError):
        AttentionParams(8, slim_block_rows=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([4, 8, 16]), st.booleans(), st.integers(0, 2**32 - 1))
def test_kernel_equivalence(lq, lk, d, causal, seed):
    if causal and lq > lk:
        lq, lk = lk, lq
    q, k, v = qkv(seed, lq, lk, d)
    ref = attention_naive(q, k, v, AttentionParams(d, causal=causal))
    outs = []
    for rows in (1, 2, lq):
        p = AttentionParams(d, causal=causal, slim_block_rows=rows)
        outs.append(attention_slim(q, k, v, p))
        assert np.abs(outs[-1] - ref).max() <= 1e-5
    assert max(np.abs(o - outs[0]).max() for o in outs) <= 1e-6
    for tile in (1, 4, lk):
        p = AttentionParams(d, causal=causal, flash_tile_q=tile, flash_tile_k=tile)
        assert np.abs(attention_flash(q, k, v, p) - ref).max() <= 1e-4


# --- decode over an INT8 cache -------------------------------------------


def quant_cache(seed, t, d):
    rng = np.random.default_rng(seed)
    return quantize_rows_i8(rand(rng, t, d)), quantize_rows_i8(rand(rng, t, d)), rand(rng, 1, d)


def test_decode_single_row():
    kq, vq, q = quant_cache(1, 1, 8)
    out = attention_decode(q, kq, vq, AttentionParams(8), 1)
    assert np.array_equal(out, dequantize(vq))


def test_decode_seed21():
    kq, vq, q = quant_cache(21, 16, 16)
    p = AttentionParams(16)
    out = attention_decode(q, kq, vq, p, 16)
    assert np.abs(out - attention_naive(q, dequantize(kq), dequantize(vq), p)).max() <= 1e-4


def test_decode_prefix_only():
    kq, vq, q = quant_cache(22, 10, 8)
    p = AttentionParams(8)
    out = attention_decode(q, kq, vq, p, 6)
    assert np.abs(out - attention_naive(q, dequantize(kq)[:6], dequantize(vq)[:6], p)).max() <= 1e-4


def test_decode_zero_query_is_uniform():
    kq, vq, _ = quant_cache(23, 9, 8)
    out = attention_decode(np.zeros((1, 8), np.float32), kq, vq, AttentionParams(8), 9)
    assert np.abs(out - dequantize(vq).mean(axis=0)).max() <= 1e-5


def test_decode_range_error():
    kq, vq, q = quant_cache(1, 4, 8)
    with pytest.raises(RangeError):
        attention_decode(q, kq, vq, AttentionParams(8), 5)


# --- multi-head wrapper -------------------------------------------------


def test_multihead_single_head_matches_kernel():
    q, k, v = qkv(30, 5, 5, 8)
    p = AttentionParams(8, causal=True)
    assert np.array_equal(multihead_attention(q, k, v, p), attention_naive(q, k, v, p))


def test_gqa_head_mapping():
    d, L = 4, 3
    rng = np.random.default_rng(31)
    q = rand(rng, L, 4 * d)
    k = rand(rng, L, 2 * d)
    v = np.concatenate([np.full((L, d), 1.0), np.full((L, d), 2.0)], axis=1).astype(np.float32)
    out = multihead_attention(q, k, v, AttentionParams(d, n_head=4, n_kv_head=2))
    assert np.allclose(out[:, : 2 * d], 1.0) and np.allclose(out[:, 2 * d :], 2.0)


def test_multihead_slim_vs_naive_seed17():
    rng = np.random.default_rng(17)
    p = AttentionParams(8, n_head=4, n_kv_head=2, causal=True, slim_block_rows=3)
    q, k, v = rand(rng, 11, 32), rand(rng, 11, 16), rand(rng, 11, 16)
    diff = multihead_attention(q, k, v, p, "slim") - multihead_attention(q, k, v, p, "naive")
    assert np.abs(diff).max() <= 1e-5


def test_multihead_dimension_error():
    p = AttentionParams(8, n_head=2, n_kv_head=1)
    with pytest.raises(DimensionError):
        multihead_attention(np.zeros((2, 8), np.float32), np.zeros((2, 8), np.float32), np.zeros((2, 8), np.float32), p)
