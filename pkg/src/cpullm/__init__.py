"""CPU-oriented transformer inference kernels: SlimAttention, an INT8 KV cache
with per-(token, head) scales, and communication-lean tensor-parallel decode."""

from .attention import (
    AttentionParams,
    ScoreBuffer,
    attention_decode,
    attention_flash,
    attention_naive,
    attention_slim,
    multihead_attention,
)
from .errors import (
    CapacityError,
    ConfigError,
    ContentionError,
    CorrectnessError,
    DimensionError,
    ProtocolError,
    RangeError,
    TransportError,
)
from .kvcache import F32KvCache, Int8KvCache, KvCacheSpec, cache_bytes, cache_bytes_with_scales
from .model import Decoder, ModelConfig, SamplerConfig, fused_matmul, generate, sample, synth_weights
from .tensor import QuantRowsI8, dequantize, matmul, matmul_hybrid, quantize_rows_i8, softmax_rows

__version__ = "0.1.0"
