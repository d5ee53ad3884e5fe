"""KV-cache sizing and storage.

Sizing follows the usual per-token volume formula

    bytes = 2 * b * (L_i + L_o) * l * n_head * s_head * s_d

(the 2 covers keys and values). For the Llama2-7B planning example
(b=256, L_i=L_o=1024, l=32, n_head=32, s_head=128, FP16) that is exactly
274,877,906,944 bytes = 256 GiB. The figure usually quoted for this example,
"about 128 GB", corresponds to a total sequence length of 1024 rather than
2048; the planner reports the formula's value.

:class:`Int8KvCache` stores every (token, head) slice of K and V as INT8 with
its own f32 scale, so a head with small activations keeps its resolution
even when a neighbouring head has a much larger range.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import CapacityError, ConfigError, DimensionError, RangeError
from .tensor import F32, QuantRowsI8, as_tensor, quantize_rows_i8

_U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class KvCacheSpec:
    b: int
    L_i: int
    L_o: int
    l: int
    n_head: int
    s_head: int
    s_d: int

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"KvCacheSpec.{f.name} must be an integer >= 1, got {value!r}")


def _checked(total: int, what: str) -> int:
    if total > _U64_MAX:
        raise OverflowError(f"{what} = {total} bytes does not fit in 64 bits")
    return total


def _slices(spec: KvCacheSpec) -> int:
    # number of (K or V, sequence, token, layer, head) slices
    return 2 * int(spec.b) * (int(spec.L_i) + int(spec.L_o)) * int(spec.l) * int(spec.n_head)


def cache_bytes(spec: KvCacheSpec) -> int:
    """Payload bytes for the whole cache; scale storage excluded."""
    return _checked(_slices(spec) * int(spec.s_head) * int(spec.s_d), "cache_bytes")


def cache_bytes_with_scales(spec: KvCacheSpec, scale_bytes: int = 4) -> int:
    """INT8 payload (s_d forced to 1) plus one scale per (token, head) slice."""
    if scale_bytes < 1:
        raise ConfigError(f"scale_bytes must be >= 1, got {scale_bytes}")
    payload = _slices(spec) * int(spec.s_head)
    return _checked(payload + _slices(spec) * scale_bytes, "cache_bytes_with_scales")


class _AppendOnlyCache:
    def __init__(self, layers: int, n_head: int, s_head: int, capacity: int, n_seq: int = 1):
        if min(layers, n_head, s_head, capacity, n_seq) < 1:
            raise ConfigError(f"{type(self).__name__} dimensions must all be >= 1")
        self.layers = layers
        self.n_head = n_head
        self.s_head = s_head
        self.capacity = capacity
        self.n_seq = n_seq
        self._filled = np.zeros((layers, n_seq), dtype=np.int64)

    def length(self, seq: int = 0) -> int:
        return int(self._filled[0, seq])

    def _check_index(self, layer: int, seq: int) -> None:
        if not 0 <= layer < self.layers:
            raise RangeError(f"layer {layer} out of range [0, {self.layers})")
        if not 0 <= seq < self.n_seq:
            raise RangeError(f"sequence {seq} out of range [0, {self.n_seq})")

    def _next_position(self, layer: int, seq: int) -> int:
        self._check_index(layer, seq)
        pos = int(self._filled[layer, seq])
        if pos >= self.capacity:
            raise CapacityError(f"KV cache full: capacity {self.capacity} tokens")
        if layer > 0 and pos >= self._filled[0, seq]:
            raise RangeError(f"layer {layer} appended ahead of layer 0 (token {pos})")
        return pos

    def _check_heads(self, k_heads, v_heads):
        k_heads = as_tensor(k_heads, 2, "k_heads")
        v_heads = as_tensor(v_heads, 2, "v_heads")
        want = (self.n_head, self.s_head)
        if k_heads.shape != want or v_heads.shape != want:
            raise DimensionError(f"expected head slices {want}, got k{k_heads.shape} v{v_heads.shape}")
        return k_heads, v_heads


class Int8KvCache(_AppendOnlyCache):
    """Preallocated, append-only INT8 K/V store.

    Layout per (layer, sequence): a ``(capacity * n_head, s_head)`` int8 array
    where row ``token * n_head + head`` is one head slice, plus a matching
    f32 scale vector. Appending to layer 0 opens a new token; the remaining
    layers then fill the same token position.
    """

    dtype = "int8"

    def __init__(self, layers: int, n_head: int, s_head: int, capacity: int, n_seq: int = 1):
        super().__init__(layers, n_head, s_head, capacity, n_seq)
        shape = (layers, n_seq, capacity * n_head, s_head)
        self._values = {kind: np.zeros(shape, dtype=np.int8) for kind in "kv"}
        self._scales = {kind: np.ones(shape[:3], dtype=F32) for kind in "kv"}

    def append_token(self, layer: int, seq: int, k_heads, v_heads) -> int:
        pos = self._next_position(layer, seq)
        k_heads, v_heads = self._check_heads(k_heads, v_heads)
        rows = slice(pos * self.n_head, (pos + 1) * self.n_head)
        for kind, heads in (("k", k_heads), ("v", v_heads)):
            q = quantize_rows_i8(heads)
            self._values[kind][layer, seq, rows] = q.values
            self._scales[kind][layer, seq, rows] = q.scales
        self._filled[layer, seq] = pos + 1
        return pos

    def read_head(self, layer: int, seq: int, head: int, upto: int, kind: str = "k") -> QuantRowsI8:
        """Zero-copy view of the first ``upto`` tokens of one head's K or V rows."""
        self._check_index(layer, seq)
        if not 0 <= head < self.n_head:
            raise RangeError(f"head {head} out of range [0, {self.n_head})")
        if not 0 <= upto <= self._filled[layer, seq]:
            raise RangeError(f"upto={upto} exceeds cached length {int(self._filled[layer, seq])}")
        if kind not in ("k", "v"):
            raise ValueError(f"kind must be 'k' or 'v', got {kind!r}")
        rows = slice(head, upto * self.n_head, self.n_head)
        return QuantRowsI8(self._values[kind][layer, seq, rows], self._scales[kind][layer, seq, rows])

    def scales(self, layer: int, seq: int = 0, kind: str = "k") -> np.ndarray:
        n = int(self._filled[layer, seq]) * self.n_head
        return self._scales[kind][layer, seq, :n]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._values.values()) + sum(a.nbytes for a in self._scales.values())


class F32KvCache(_AppendOnlyCache):
    """Full-precision cache with the same append/read protocol (the baseline)."""

    dtype = "f32"

    def __init__(self, layers: int, n_head: int, s_head: int, capacity: int, n_seq: int = 1):
        super().__init__(layers, n_head, s_head, capacity, n_seq)
        shape = (layers, n_seq, capacity, n_head, s_head)
        self._store = {kind: np.zeros(shape, dtype=F32) for kind in "kv"}

    def append_token(self, layer: int, seq: int, k_heads, v_heads) -> int:
        pos = self._next_position(layer, seq)
        k_heads, v_heads = self._check_heads(k_heads, v_heads)
        self._store["k"][layer, seq, pos] = k_heads
        self._store["v"][layer, seq, pos] = v_heads
        self._filled[layer, seq] = pos + 1
        return pos

    def read_head(self, layer: int, seq: int, head: int, upto: int, kind: str = "k") -> np.ndarray:
        self._check_index(layer, seq)
        if not 0 <= head < self.n_head:
            raise RangeError(f"head {head} out of range [0, {self.n_head})")
        if not 0 <= upto <= self._filled[layer, seq]:
            raise RangeError(f"upto={upto} exceeds cached length {int(self._filled[layer, seq])}")
        return self._store[kind][layer, seq, :upto, head]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._store.values())


def make_cache(dtype: str, layers: int, n_head: int, s_head: int, capacity: int, n_seq: int = 1):
    if dtype == "int8":
        return Int8KvCache(layers, n_head, s_head, capacity, n_seq)
    if dtype == "f32":
        return F32KvCache(layers, n_head, s_head, capacity, n_seq)
    raise ConfigError(f"unknown cache dtype {dtype!r}")
