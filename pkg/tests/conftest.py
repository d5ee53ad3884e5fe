import math

import numpy as np
import pytest


def triple_loop_matmul(a, b, transpose_b=False):
    """Scalar reference: f32 products accumulated left to right from 0."""
    bt = b.T if transpose_b else b
    m, k = a.shape
    n = bt.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for t in range(k):
                acc = np.float32(acc + np.float32(a[i, t] * bt[t, j]))
            out[i, j] = acc
    return out


def attention_f64(q, k, v, causal=False, scale=None):
    """Row-by-row float64 attention with plain Python softmax."""
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    lq, lk = q.shape[0], k.shape[0]
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    out = np.zeros((lq, v.shape[1]))
    for i in range(lq):
        visible = range(lk - lq + i + 1) if causal else range(lk)
        scores = [scale * float(q[i] @ k[j]) for j in visible]
        mx = max(scores)
        w = [math.exp(s - mx) for s in scores]
        z = sum(w)
        for j, wj in zip(visible, w):
            out[i] += wj / z * v[j]
    return out


def rand(rng, *shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
