"""Toy Llama-style decoder with synthetic, seed-determined weights.

Block structure: RMSNorm -> GQA attention (rotary positions) -> residual,
RMSNorm -> SwiGLU FFN -> residual. The LM head is tied to the embedding.

The per-token decode body lives in :class:`DecoderCore`, which operates on a
(possibly sharded) set of layer weights and hands its two reduction points per
layer to a ``reducer``. The single-process model uses :class:`LocalReducer`;
tensor-parallel workers plug in a transport-backed one, so both paths run the
same arithmetic.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, ScoreBuffer, attention_decode, attention_naive, multihead_attention
from .errors import CapacityError, ConfigError, DimensionError
from .kvcache import make_cache
from .prng import derive_key, uniform_pm1
from .tensor import F32, as_tensor, matmul

FUSED_POSTS = ("none", "bias_silu", "bias_gelu", "residual_add")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    n_head: int = 4
    n_kv_head: int = 2
    head_size: int = 16
    ffn_dim: int = 128
    vocab: int = 256
    max_seq: int = 64
    cache_dtype: str = "f32"
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        counts = ("layers", "d_model", "n_head", "n_kv_head", "head_size", "ffn_dim", "vocab", "max_seq")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be >= 1")
        if self.d_model != self.n_head * self.head_size:
            raise ConfigError(
                f"d_model={self.d_model} != n_head*head_size={self.n_head * self.head_size}"
            )
        if self.n_head % self.n_kv_head:
            raise ConfigError(f"n_head={self.n_head} not a multiple of n_kv_head={self.n_kv_head}")
        if self.head_size % 2:
            raise ConfigError("rotary embeddings need an even head_size")
        if self.cache_dtype not in ("f32", "int8"):
            raise ConfigError(f"cache_dtype must be 'f32' or 'int8', got {self.cache_dtype!r}")

    @property
    def kv_dim(self) -> int:
        return self.n_kv_head * self.head_size

    @property
    def group_size(self) -> int:
        return self.n_head // self.n_kv_head


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # (d_model,)
    w_qkv: np.ndarray  # (d_model, (n_q + 2 n_kv) * head_size), columns [q | k | v]
    w_o: np.ndarray  # (n_q * head_size, d_model)
    ffn_norm: np.ndarray
    w_gate: np.ndarray  # (d_model, ffn)
    w_up: np.ndarray  # (d_model, ffn)
    w_down: np.ndarray  # (ffn, d_model)


@dataclass
class DecoderWeights:
    embedding: np.ndarray  # (vocab, d_model); also the LM head
    layers: list[LayerWeights]
    final_norm: np.ndarray

    def tensors(self):
        yield self.embedding
        for lw in self.layers:
            yield from (lw.attn_norm, lw.w_qkv, lw.w_o, lw.ffn_norm, lw.w_gate, lw.w_up, lw.w_down)
        yield self.final_norm

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors():
            h.update(np.ascontiguousarray(t, dtype=F32).tobytes())
        return h.hexdigest()


def synth_weights(config: ModelConfig, seed: int) -> DecoderWeights:
    """Deterministic weights: tensor ``j`` draws from the sub-stream ``derive_key(seed, j)``.

    Stream order: embedding (j=0), then per layer ``w_qkv, w_o, w_gate, w_up,
    w_down``. Values are uniform on [-1, 1) times ``1/sqrt(d_model)``, rounded
    to f32; norm gains are 1.
    """
    c = config
    scale = 1.0 / math.sqrt(c.d_model)
    stream = iter(range(1 << 30))

    def draw(*shape):
        n = int(np.prod(shape))
        vals = uniform_pm1(derive_key(seed, next(stream)), n).astype(np.float64) * scale
        return vals.astype(F32).reshape(shape)

    embedding = draw(c.vocab, c.d_model)
    qkv_cols = (c.n_head + 2 * c.n_kv_head) * c.head_size
    layers = []
    for _ in range(c.layers):
        layers.append(
            LayerWeights(
                attn_norm=np.ones(c.d_model, dtype=F32),
                w_qkv=draw(c.d_model, qkv_cols),
                w_o=draw(c.n_head * c.head_size, c.d_model),
                ffn_norm=np.ones(c.d_model, dtype=F32),
                w_gate=draw(c.d_model, c.ffn_dim),
                w_up=draw(c.d_model, c.ffn_dim),
                w_down=draw(c.ffn_dim, c.d_model),
            )
        )
    return DecoderWeights(embedding, layers, np.ones(c.d_model, dtype=F32))


def silu(x: np.ndarray) -> np.ndarray:
    return x / (F32(1.0) + np.exp(-x))


def gelu(x: np.ndarray) -> np.ndarray:
    c = F32(math.sqrt(2.0 / math.pi))
    return F32(0.5) * x * (F32(1.0) + np.tanh(c * (x + F32(0.044715) * x * x * x)))


def fused_matmul(x, w, post: str = "none", bias=None, residual=None, out: np.ndarray | None = None) -> np.ndarray:
    """``matmul(x, w)`` with a post-op applied in place on the output tile."""
    if post not in FUSED_POSTS:
        raise ConfigError(f"unknown post-op {post!r}; expected one of {FUSED_POSTS}")
    y = matmul(x, w, out=out)
    if post in ("bias_silu", "bias_gelu"):
        if bias is not None:
            bias = as_tensor(bias)
            if bias.shape not in ((y.shape[1],), (1, y.shape[1])):
                raise DimensionError(f"bias{bias.shape} does not match output{y.shape}")
            y += bias
        y[...] = silu(y) if post == "bias_silu" else gelu(y)
    elif post == "residual_add":
        if residual is None:
            raise ConfigError("residual_add needs a residual tensor")
        residual = as_tensor(residual)
        if residual.shape != y.shape:
            raise DimensionError(f"residual{residual.shape} does not match output{y.shape}")
        y += residual
    return y


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + F32(eps))) * gain


def rope(x: np.ndarray, positions, head_size: int, theta: float) -> np.ndarray:
    """Rotate-half rotary embedding over ``(L, heads * head_size)``."""
    L = x.shape[0]
    half = head_size // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / head_size)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(F32)[:, None, :]
    sin = np.sin(ang).astype(F32)[:, None, :]
    xh = x.reshape(L, -1, head_size)
    x1, x2 = xh[..., :half], xh[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)
    return out.reshape(L, -1)


class LocalReducer:
    """No-op reducer for single-process execution."""

    def buffer(self, slot, shape) -> np.ndarray:
        return np.empty(shape, dtype=F32)

    def allreduce(self, slot, buf: np.ndarray) -> np.ndarray:
        return buf


class DecoderCore:
    """Per-token decode body over a (possibly sharded) weight set.

    ``kv_map[h]`` is the local KV head serving local query head ``h``.
    """

    def __init__(self, config: ModelConfig, layers: list[LayerWeights], n_q: int, n_kv: int,
                 kv_map, cache, reducer=None):
        self.config = config
        self.layers = layers
        self.n_q = n_q
        self.n_kv = n_kv
        self.kv_map = list(kv_map)
        self.cache = cache
        self.reducer = reducer or LocalReducer()
        self.decode_params = AttentionParams(config.head_size, causal=False)

    def decode_layer(self, h: np.ndarray, layer: int, seq: int, pos: int) -> np.ndarray:
        c = self.config
        d = c.head_size
        lw = self.layers[layer]
        xn = rms_norm(h, lw.attn_norm, c.norm_eps)
        qkv = matmul(xn, lw.w_qkv)
        q = rope(qkv[:, : self.n_q * d], [pos], d, c.rope_theta)
        k = rope(qkv[:, self.n_q * d : (self.n_q + self.n_kv) * d], [pos], d, c.rope_theta)
        v = qkv[:, (self.n_q + self.n_kv) * d :]
        self.cache.append_token(layer, seq, k.reshape(self.n_kv, d), v.reshape(self.n_kv, d))
        t = pos + 1
        attn = np.empty((1, self.n_q * d), dtype=F32)
        for hq in range(self.n_q):
            g = self.kv_map[hq]
            kh = self.cache.read_head(layer, seq, g, t, "k")
            vh = self.cache.read_head(layer, seq, g, t, "v")
            qh = q[:, hq * d : (hq + 1) * d]
            if self.cache.dtype == "int8":
                attn[:, hq * d : (hq + 1) * d] = attention_decode(qh, kh, vh, self.decode_params, t)
            else:
                attn[:, hq * d : (hq + 1) * d] = attention_naive(qh, kh, vh, self.decode_params)

        buf = self.reducer.buffer(("attn_out", layer), (1, c.d_model))
        fused_matmul(attn, lw.w_o, out=buf)
        h = self.reducer.allreduce(("attn_out", layer), buf) + h

        xn = rms_norm(h, lw.ffn_norm, c.norm_eps)
        act = fused_matmul(xn, lw.w_gate, "bias_silu")
        act *= matmul(xn, lw.w_up)
        buf = self.reducer.buffer(("ffn_down", layer), (1, c.d_model))
        fused_matmul(act, lw.w_down, out=buf)
        return self.reducer.allreduce(("ffn_down", layer), buf) + h


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "greedy"
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "topk"):
            raise ConfigError(f"sampler mode must be 'greedy' or 'topk', got {self.mode!r}")
        if self.mode == "topk" and self.k < 1:
            raise ConfigError(f"top-k sampling needs k >= 1, got {self.k}")


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries ordered by (logit desc, index asc)."""
    order = np.lexsort((np.arange(logits.size), -logits.astype(np.float64)))
    return order[:k]


def sample_from_candidates(tokens, logits, sampler: SamplerConfig, step: int = 0) -> int:
    """Draw from the softmax over candidate logits (already in top-k order)."""
    logits = np.asarray(logits, dtype=np.float64)
    p = np.exp(logits - logits.max())
    cdf = np.cumsum(p / p.sum())
    u = np.random.default_rng([sampler.seed, step]).random()
    idx = min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)
    return int(tokens[idx])


def sample(logits, sampler: SamplerConfig, step: int = 0) -> int:
    """Greedy (lowest id wins ties) or seeded top-k sampling.

    The draw depends only on ``(logits, sampler, step)``.
    """
    logits = as_tensor(logits).reshape(-1)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if sampler.mode == "greedy":
        return int(np.argmax(logits))
    if sampler.k > logits.size:
        raise ConfigError(f"k={sampler.k} exceeds vocab {logits.size}")
    idx = topk_indices(logits, sampler.k)
    return sample_from_candidates(idx, logits[idx], sampler, step)


class Decoder:
    """Single-process toy decoder with a per-sequence KV cache."""

    def __init__(self, config: ModelConfig, weights: DecoderWeights | None = None, seed: int = 0,
                 kernel: str = "slim", n_seq: int = 1, slim_block_rows: int = 16,
                 flash_tile: int = 16):
        self.config = config
        self.weights = weights if weights is not None else synth_weights(config, seed)
        self.kernel = kernel
        self.n_seq = n_seq
        self.prefill_params = AttentionParams(
            config.head_size, config.n_head, config.n_kv_head, causal=True,
            slim_block_rows=slim_block_rows, flash_tile_q=flash_tile, flash_tile_k=flash_tile,
        )
        self.step_times: list[float] = []
        self.reset()

    def reset(self) -> None:
        c = self.config
        self.cache = make_cache(c.cache_dtype, c.layers, c.n_kv_head, c.head_size, c.max_seq, self.n_seq)
        kv_map = [h // c.group_size for h in range(c.n_head)]
        self.core = DecoderCore(c, self.weights.layers, c.n_head, c.n_kv_head, kv_map, self.cache)

    def embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise ConfigError(f"token id outside vocab [0, {self.config.vocab})")
        return self.weights.embedding[tokens]

    def lm_head(self, h: np.ndarray) -> np.ndarray:
        hn = rms_norm(h, self.weights.final_norm, self.config.norm_eps)
        return matmul(hn, self.weights.embedding, transpose_b=True)

    def _layer_full(self, h, lw: LayerWeights, kernel: str, buf, layer=None, seq=0):
        c = self.config
        d = c.head_size
        positions = np.arange(h.shape[0])
        xn = rms_norm(h, lw.attn_norm, c.norm_eps)
        qkv = matmul(xn, lw.w_qkv)
        q = rope(qkv[:, : c.n_head * d], positions, d, c.rope_theta)
        k = rope(qkv[:, c.n_head * d : c.n_head * d + c.kv_dim], positions, d, c.rope_theta)
        v = np.ascontiguousarray(qkv[:, c.n_head * d + c.kv_dim :])
        if layer is not None:
            for pos in positions:
                self.cache.append_token(layer, seq, k[pos].reshape(c.n_kv_head, d), v[pos].reshape(c.n_kv_head, d))
        attn = multihead_attention(q, k, v, self.prefill_params, kernel, buf)
        h = fused_matmul(attn, lw.w_o, "residual_add", residual=h)
        xn = rms_norm(h, lw.ffn_norm, c.norm_eps)
        act = fused_matmul(xn, lw.w_gate, "bias_silu")
        act *= matmul(xn, lw.w_up)
        return fused_matmul(act, lw.w_down, "residual_add", residual=h)

    def forward(self, tokens) -> np.ndarray:
        """Cache-free full forward with the naive kernel; logits for every position."""
        h = self.embed(tokens)
        for lw in self.weights.layers:
            h = self._layer_full(h, lw, "naive", None)
        return self.lm_head(h)

    def prefill(self, tokens, seq: int = 0) -> np.ndarray:
        """Run the prompt through every layer, fill the cache, return last-position logits."""
        tokens = list(tokens)
        if not 1 <= len(tokens) <= self.config.max_seq:
            raise CapacityError(f"prompt length {len(tokens)} outside [1, {self.config.max_seq}]")
        if self.cache.length(seq):
            raise CapacityError(f"sequence {seq} already has {self.cache.length(seq)} cached tokens")
        h = self.embed(tokens)
        buf = None
        if self.kernel == "slim":
            buf = ScoreBuffer(min(self.prefill_params.slim_block_rows, len(tokens)), len(tokens))
        for i, lw in enumerate(self.weights.layers):
            h = self._layer_full(h, lw, self.kernel, buf, layer=i, seq=seq)
        return self.lm_head(h[-1:])

    def decode_step(self, token: int, seq: int = 0) -> np.ndarray:
        pos = self.cache.length(seq)
        if pos >= self.config.max_seq:
            raise CapacityError(f"KV cache full at {pos} tokens")
        h = self.embed([token])
        for layer in range(self.config.layers):
            h = self.core.decode_layer(h, layer, seq, pos)
        return self.lm_head(h)


def generate(model: Decoder, prompt, n_out: int, sampler: SamplerConfig | None = None, seq: int = 0) -> list[int]:
    """Prefill then ``n_out`` sample/decode steps; step wall times go to ``model.step_times``."""
    sampler = sampler or SamplerConfig()
    prompt = list(prompt)
    if len(prompt) + n_out > model.config.max_seq:
        raise CapacityError(f"prompt {len(prompt)} + n_out {n_out} exceeds max_seq {model.config.max_seq}")
    model.step_times = []
    if n_out == 0:
        return []
    logits = model.prefill(prompt, seq)
    out = []
    for step in range(n_out):
        tok = sample(logits, sampler, step)
        out.append(tok)
        if step == n_out - 1:
            break
        t0 = time.perf_counter()
        logits = model.decode_step(tok, seq)
        model.step_times.append(time.perf_counter() - t0)
    return out
