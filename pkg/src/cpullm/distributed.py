"""Tensor-parallel decode over an instrumented in-process transport.

Each worker is a thread holding one shard of every layer (column-parallel QKV
and gate/up, row-parallel output and down projections) plus the full
embedding table. A decode step is:

1. the root broadcasts the next token id (8 bytes per link) and every worker
   embeds it locally, instead of shipping a ``d_model`` float row;
2. the layer stack runs with one sum-allreduce after each row-parallel
   projection, summed in ascending worker order so results are bit-stable;
3. every worker scores only its vocabulary shard, keeps its local top-k and
   sends that short list to the root, instead of reducing the full logit
   vector. Shards are disjoint, so the merged list is the exact global top-k.

With zero-copy enabled the row-parallel projections write straight into
transport-owned regions obtained from :meth:`Transport.register_output_buffer`;
otherwise results are staged with an explicit copy, which the transport
counts.
"""

from __future__ import annotations

import csv
import hashlib
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContentionError, ProtocolError, TransportError
from .kvcache import make_cache
from .model import (
    DecoderCore,
    DecoderWeights,
    LayerWeights,
    ModelConfig,
    SamplerConfig,
    rms_norm,
    sample_from_candidates,
    synth_weights,
)
from .tensor import F32, as_tensor, matmul

TOKEN_DTYPE = np.dtype("<i8")
TOPK_DTYPE = np.dtype([("token", "<i4"), ("logit", "<f4")])


class TopKEntry(NamedTuple):
    token: int
    logit: float


# ---------------------------------------------------------------------------
# Sharding
# ---------------------------------------------------------------------------


def _split(n: int, parts: int) -> list[tuple[int, int]]:
    bounds = [n * i // parts for i in range(parts + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(parts)]


@dataclass(frozen=True)
class ShardPlan:
    n_workers: int
    head_ranges: tuple[tuple[int, int], ...]
    kv_ranges: tuple[tuple[int, int], ...]
    vocab_ranges: tuple[tuple[int, int], ...]
    ffn_ranges: tuple[tuple[int, int], ...]

    def validate(self, config: ModelConfig) -> None:
        for name, ranges, total in (
            ("head", self.head_ranges, config.n_head),
            ("vocab", self.vocab_ranges, config.vocab),
            ("ffn", self.ffn_ranges, config.ffn_dim),
        ):
            if len(ranges) != self.n_workers:
                raise ConfigError(f"{name} ranges: {len(ranges)} entries for {self.n_workers} workers")
            cursor = 0
            for lo, hi in ranges:
                if lo != cursor or hi <= lo:
                    raise ConfigError(f"{name} ranges {ranges} do not partition [0, {total})")
                cursor = hi
            if cursor != total:
                raise ConfigError(f"{name} ranges {ranges} do not cover [0, {total})")


def make_shard_plan(config: ModelConfig, n_workers: int) -> ShardPlan:
    """Contiguous even split of heads, vocabulary and FFN columns.

    Query heads must divide evenly. When a worker's head count is a multiple
    of the GQA group size its KV heads are disjoint from everyone else's;
    when it is a divisor of the group size, all its query heads sit in one
    group and that KV head is replicated on the workers sharing the group.
    """
    c = config
    if n_workers < 1:
        raise ConfigError("n_workers must be >= 1")
    if c.n_head % n_workers:
        raise ConfigError(f"n_head={c.n_head} is not divisible by n_workers={n_workers}")
    per = c.n_head // n_workers
    group = c.group_size
    if per % group and group % per:
        raise ConfigError(
            f"{per} query heads per worker neither a multiple nor a divisor of GQA group size {group}"
        )
    if c.vocab < n_workers or c.ffn_dim < n_workers:
        raise ConfigError(f"vocab={c.vocab} and ffn_dim={c.ffn_dim} need at least one entry per worker")
    heads = tuple((w * per, (w + 1) * per) for w in range(n_workers))
    kv = tuple((lo // group, max(lo // group + 1, hi // group)) for lo, hi in heads)
    plan = ShardPlan(n_workers, heads, kv, tuple(_split(c.vocab, n_workers)), tuple(_split(c.ffn_dim, n_workers)))
    plan.validate(c)
    return plan


def shard_layer(lw: LayerWeights, config: ModelConfig, heads, kv, ffn) -> LayerWeights:
    d = config.head_size
    qcols = np.arange(heads[0] * d, heads[1] * d)
    kcols = config.n_head * d + np.arange(kv[0] * d, kv[1] * d)
    vcols = kcols + config.kv_dim
    cols = np.concatenate([qcols, kcols, vcols])
    return LayerWeights(
        attn_norm=lw.attn_norm,
        w_qkv=np.ascontiguousarray(lw.w_qkv[:, cols]),
        w_o=np.ascontiguousarray(lw.w_o[heads[0] * d : heads[1] * d]),
        ffn_norm=lw.ffn_norm,
        w_gate=np.ascontiguousarray(lw.w_gate[:, ffn[0] : ffn[1]]),
        w_up=np.ascontiguousarray(lw.w_up[:, ffn[0] : ffn[1]]),
        w_down=np.ascontiguousarray(lw.w_down[ffn[0] : ffn[1]]),
    )


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------


@dataclass
class TransportRecord:
    step: int
    worker: int
    collective: str
    bytes: int
    copy_count: int


_CLOSED = object()


class Transport:
    """FIFO point-to-point channels between ``n_workers`` ranks, with byte and copy counters.

    Counters are kept per (worker, collective) for the current step;
    :meth:`begin_step` archives them into :attr:`log` and starts from zero.
    """

    def __init__(self, n_workers: int, timeout: float = 30.0):
        if n_workers < 1:
            raise ConfigError("transport needs at least one worker")
        self.n_workers = n_workers
        self.timeout = timeout
        self._channels = {
            (s, d): queue.Queue() for s in range(n_workers) for d in range(n_workers) if s != d
        }
        self._lock = threading.Lock()
        self._counters: dict[tuple[int, str], list[int]] = {}
        self._regions: dict[tuple[int, object], np.ndarray] = {}
        self._in_flight: set[tuple[int, object]] = set()
        self.step = 0
        self.log: list[TransportRecord] = []
        self.closed = False

    # -- instrumentation ---------------------------------------------------
    def _count(self, worker: int, collective: str, nbytes: int = 0, copies: int = 0) -> None:
        with self._lock:
            entry = self._counters.setdefault((worker, collective), [0, 0])
            entry[0] += nbytes
            entry[1] += copies

    def record_copy(self, worker: int, collective: str) -> None:
        self._count(worker, collective, copies=1)

    def step_records(self) -> list[TransportRecord]:
        with self._lock:
            return [
                TransportRecord(self.step, w, c, b, n)
                for (w, c), (b, n) in sorted(self._counters.items())
            ]

    def begin_step(self, step: int) -> None:
        self.log.extend(self.step_records())
        with self._lock:
            self._counters.clear()
            self.step = step

    def flush(self) -> None:
        self.log.extend(self.step_records())
        with self._lock:
            self._counters.clear()

    def bytes_sent(self, worker: int | None = None, collective: str | None = None) -> int:
        with self._lock:
            return sum(
                b for (w, c), (b, _) in self._counters.items()
                if (worker is None or w == worker) and (collective is None or c == collective)
            )

    def copy_count(self, worker: int | None = None) -> int:
        with self._lock:
            return sum(n for (w, _), (_, n) in self._counters.items() if worker is None or w == worker)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "worker", "collective", "bytes", "copy_count"])
            for r in self.log:
                writer.writerow([r.step, r.worker, r.collective, r.bytes, r.copy_count])

    # -- messaging ---------------------------------------------------------
    def send(self, src: int, dst: int, payload, collective: str) -> None:
        if self.closed:
            raise TransportError("transport closed")
        nbytes = payload.nbytes if isinstance(payload, np.ndarray) else 0
        self._count(src, collective, nbytes)
        self._channels[(src, dst)].put(payload)

    def recv(self, dst: int, src: int):
        try:
            item = self._channels[(src, dst)].get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(f"rank {dst} timed out waiting for rank {src}") from None
        if item is _CLOSED:
            raise TransportError("transport closed")
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        """Fail every pending and future receive."""
        self.closed = True
        for ch in self._channels.values():
            ch.put(_CLOSED)

    # -- zero-copy regions -------------------------------------------------
    def register_output_buffer(self, worker: int, slot, shape) -> np.ndarray:
        """Hand out the communication region for ``slot``; the caller writes its result there."""
        key = (worker, slot)
        with self._lock:
            if key in self._in_flight:
                raise ContentionError(f"slot {slot!r} of worker {worker} is already in flight")
            region = self._regions.get(key)
            if region is None or region.shape != tuple(shape):
                region = self._regions[key] = np.empty(shape, dtype=F32)
            self._in_flight.add(key)
            return region

    def release(self, worker: int, slot) -> None:
        with self._lock:
            self._in_flight.discard((worker, slot))

    def in_flight(self, worker: int, slot) -> bool:
        return (worker, slot) in self._in_flight


# ---------------------------------------------------------------------------
# Collectives (called by every rank, SPMD style)
# ---------------------------------------------------------------------------


def bcast(transport: Transport, rank: int, root: int, value, collective: str):
    if rank == root:
        for dst in range(transport.n_workers):
            if dst != root:
                transport.send(root, dst, value, collective)
        return value
    return transport.recv(rank, root)


def gather(transport: Transport, rank: int, root: int, value, collective: str):
    if rank != root:
        transport.send(rank, root, value, collective)
        return None
    return [value if src == root else transport.recv(root, src) for src in range(transport.n_workers)]


def allreduce(transport: Transport, rank: int, x: np.ndarray, collective: str = "allreduce", root: int = 0) -> np.ndarray:
    """Sum over ranks, reduced at ``root`` in ascending rank order and sent back."""
    parts = gather(transport, rank, root, x, collective)
    if rank != root:
        return transport.recv(rank, root)
    shapes = [p.shape for p in parts]
    bad = [w for w, s in enumerate(shapes) if s != shapes[root]]
    if bad:
        err = ProtocolError(f"allreduce shape disagreement {shapes}", workers=bad)
        for dst in range(transport.n_workers):
            if dst != root:
                transport.send(root, dst, err, collective)
        raise err
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    total.flags.writeable = False
    for dst in range(transport.n_workers):
        if dst != root:
            transport.send(root, dst, total, collective)
    return total


def _run_spmd(transport: Transport, fn, *per_rank_args):
    n = transport.n_workers
    with ThreadPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(fn, rank, *(a[rank] for a in per_rank_args)) for rank in range(n)]
        return [f.result() for f in futures]


def broadcast_token(transport: Transport, root: int, token: int) -> list[int]:
    """Broadcast a token id from ``root``; returns the id as seen by every worker."""
    if not 0 <= root < transport.n_workers:
        raise ConfigError(f"root {root} out of range")
    payload = np.array([token], dtype=TOKEN_DTYPE)
    got = _run_spmd(transport, lambda r: bcast(transport, r, root, payload if r == root else None, "broadcast_token"))
    return [int(g[0]) for g in got]


def allreduce_sum(transport: Transport, xs) -> list[np.ndarray]:
    """Allreduce one tensor per worker; returns each worker's (identical) result."""
    if len(xs) != transport.n_workers:
        raise ProtocolError(f"{len(xs)} inputs for {transport.n_workers} workers")
    xs = [as_tensor(x) for x in xs]
    return _run_spmd(transport, lambda r, x: allreduce(transport, r, x), xs)


# ---------------------------------------------------------------------------
# Top-k reduction
# ---------------------------------------------------------------------------


def _order(entries):
    return sorted(entries, key=lambda e: (-e.logit, e.token))


def local_topk(logits_shard, k: int, vocab_offset: int = 0) -> list[TopKEntry]:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    x = as_tensor(logits_shard).reshape(-1)
    order = np.lexsort((np.arange(x.size), -x.astype(np.float64)))[:k]
    return [TopKEntry(int(i) + vocab_offset, float(x[i])) for i in order]


def merge_topk(lists, k: int, ranges=None) -> list[TopKEntry]:
    """Global top-k from per-shard top-k lists; exact when shards are disjoint."""
    if ranges is not None:
        spans = sorted(ranges)
        for (lo0, hi0), (lo1, hi1) in zip(spans, spans[1:]):
            if lo1 < hi0:
                raise ProtocolError(f"overlapping vocab ranges {(lo0, hi0)} and {(lo1, hi1)}")
    seen: dict[int, int] = {}
    for w, lst in enumerate(lists):
        for e in lst:
            if e.token in seen and seen[e.token] != w:
                raise ProtocolError(f"token {e.token} reported by workers {seen[e.token]} and {w}",
                                    workers=(seen[e.token], w))
            seen[e.token] = w
    return _order([TopKEntry(int(e.token), float(e.logit)) for lst in lists for e in lst])[:k]


def encode_topk(entries) -> np.ndarray:
    arr = np.empty(len(entries), dtype=TOPK_DTYPE)
    for i, e in enumerate(entries):
        arr[i] = (e.token, e.logit)
    return arr


def decode_topk(arr: np.ndarray) -> list[TopKEntry]:
    return [TopKEntry(int(t), float(v)) for t, v in zip(arr["token"], arr["logit"])]


# ---------------------------------------------------------------------------
# Workers and the decode step
# ---------------------------------------------------------------------------


class TransportReducer:
    """Routes a worker's row-parallel outputs through the transport."""

    def __init__(self, transport: Transport, rank: int, zero_copy: bool):
        self.transport = transport
        self.rank = rank
        self.zero_copy = zero_copy

    def buffer(self, slot, shape) -> np.ndarray:
        if self.zero_copy:
            return register_output_buffer(self.transport, self.rank, slot, shape)
        return np.empty(shape, dtype=F32)

    def allreduce(self, slot, buf: np.ndarray) -> np.ndarray:
        t = self.transport
        if not self.zero_copy:
            region = t.register_output_buffer(self.rank, slot, buf.shape)
            np.copyto(region, buf)
            t.record_copy(self.rank, "allreduce")
            buf = region
        try:
            return allreduce(t, self.rank, buf, "allreduce")
        finally:
            t.release(self.rank, slot)


def register_output_buffer(transport: Transport, worker: int, slot, shape) -> np.ndarray:
    return transport.register_output_buffer(worker, slot, shape)


class Worker:
    def __init__(self, rank: int, config: ModelConfig, weights: DecoderWeights, plan: ShardPlan,
                 transport: Transport, zero_copy: bool = True):
        c = config
        self.rank = rank
        self.config = config
        self.embedding = weights.embedding
        self.final_norm = weights.final_norm
        heads, kv, ffn = plan.head_ranges[rank], plan.kv_ranges[rank], plan.ffn_ranges[rank]
        self.vocab_range = plan.vocab_ranges[rank]
        self.lm_head = np.ascontiguousarray(weights.embedding[self.vocab_range[0] : self.vocab_range[1]])
        layers = [shard_layer(lw, c, heads, kv, ffn) for lw in weights.layers]
        n_q, n_kv = heads[1] - heads[0], kv[1] - kv[0]
        kv_map = [(heads[0] + h) // c.group_size - kv[0] for h in range(n_q)]
        self.cache = make_cache(c.cache_dtype, c.layers, n_kv, c.head_size, c.max_seq)
        self.reducer = TransportReducer(transport, rank, zero_copy)
        self.core = DecoderCore(c, layers, n_q, n_kv, kv_map, self.cache, self.reducer)

    def shard_logits(self, h: np.ndarray) -> np.ndarray:
        hn = rms_norm(h, self.final_norm, self.config.norm_eps)
        return matmul(hn, self.lm_head, transpose_b=True)


@dataclass
class StepResult:
    token: int  # next token chosen at the root
    candidates: list[TopKEntry]
    shard_logits: list[np.ndarray]
    metrics: list[TransportRecord]
    seconds: float = 0.0

    @property
    def logits(self) -> np.ndarray:
        return np.concatenate(self.shard_logits, axis=1)


class DistributedDecoder:
    """``n_workers`` tensor-parallel workers driven step by step from the root (rank 0).

    ``token_mode``: ``"token"`` broadcasts ids, ``"embedding"`` broadcasts the
    embedded row (baseline). ``logit_mode``: ``"topk"`` gathers per-worker
    top-k lists, ``"allreduce"`` reduces full-vocabulary logits (baseline).
    """

    root = 0

    def __init__(self, config: ModelConfig, n_workers: int, seed: int = 0, weights: DecoderWeights | None = None,
                 k: int = 8, sampler: SamplerConfig | None = None, token_mode: str = "token",
                 logit_mode: str = "topk", zero_copy: bool = True, check_replication: bool = False,
                 timeout: float = 30.0):
        if token_mode not in ("token", "embedding"):
            raise ConfigError(f"token_mode must be 'token' or 'embedding', got {token_mode!r}")
        if logit_mode not in ("topk", "allreduce"):
            raise ConfigError(f"logit_mode must be 'topk' or 'allreduce', got {logit_mode!r}")
        self.sampler = sampler or SamplerConfig()
        if self.sampler.mode == "topk" and self.sampler.k > k:
            raise ConfigError(f"sampler k={self.sampler.k} exceeds reduction k={k}")
        if k < 1 or k > config.vocab:
            raise ConfigError(f"k={k} outside [1, vocab={config.vocab}]")
        self.config = config
        self.k = k
        self.token_mode = token_mode
        self.logit_mode = logit_mode
        self.check_replication = check_replication
        self.plan = make_shard_plan(config, n_workers)
        self.transport = Transport(n_workers, timeout=timeout)
        weights = weights if weights is not None else synth_weights(config, seed)
        self.workers = [Worker(r, config, weights, self.plan, self.transport, zero_copy) for r in range(n_workers)]
        self.steps = 0
        self._pool = ThreadPoolExecutor(max_workers=n_workers)

    @property
    def n_workers(self) -> int:
        return self.plan.n_workers

    def close(self) -> None:
        self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _worker_step(self, rank: int, token: int | None):
        t = self.transport
        w = self.workers[rank]
        is_root = rank == self.root
        if self.token_mode == "token":
            payload = np.array([token], dtype=TOKEN_DTYPE) if is_root else None
            tok = int(bcast(t, rank, self.root, payload, "broadcast_token")[0])
            h = w.embedding[tok][None, :]
        else:
            payload = w.embedding[token][None, :] if is_root else None
            h = bcast(t, rank, self.root, payload, "broadcast_embedding")
        if self.check_replication:
            self._check_replicated(rank, h)

        pos = w.cache.length(0)
        for layer in range(self.config.layers):
            h = w.core.decode_layer(h, layer, 0, pos)

        shard = w.shard_logits(h)
        lo, hi = w.vocab_range
        if self.logit_mode == "topk":
            mine = encode_topk(local_topk(shard, self.k, lo))
            lists = gather(t, rank, self.root, mine, "gather_topk")
            candidates = merge_topk([decode_topk(x) for x in lists], self.k, self.plan.vocab_ranges) if is_root else None
        else:
            full = np.zeros((1, self.config.vocab), dtype=F32)
            full[:, lo:hi] = shard
            total = allreduce(t, rank, full, "allreduce_logits")
            candidates = local_topk(total, self.k) if is_root else None
        return candidates, shard

    def _check_replicated(self, rank: int, h: np.ndarray) -> None:
        digest = np.frombuffer(hashlib.sha1(np.ascontiguousarray(h).tobytes()).digest(), dtype=np.uint8)
        digests = gather(self.transport, rank, self.root, digest, "replication_check")
        if rank == self.root:
            bad = [w for w, dg in enumerate(digests) if not np.array_equal(dg, digests[self.root])]
            err = ProtocolError(f"replicated hidden state diverged on workers {bad}", workers=bad) if bad else None
            for dst in range(self.n_workers):
                if dst != self.root:
                    self.transport.send(self.root, dst, err if err else np.zeros(1, np.uint8), "replication_check")
            if err:
                raise err
        else:
            self.transport.recv(rank, self.root)

    def _guarded(self, rank: int, token: int):
        try:
            return self._worker_step(rank, token)
        except Exception:
            self.transport.close()
            raise

    def step(self, token: int) -> StepResult:
        if self.transport.closed:
            raise TransportError("transport closed by an earlier failure")
        if not 0 <= token < self.config.vocab:
            raise ConfigError(f"token {token} outside vocab")
        self.transport.begin_step(self.steps)
        t0 = time.perf_counter()
        futures = [self._pool.submit(self._guarded, r, token) for r in range(self.n_workers)]
        results = [f.result() for f in futures]
        seconds = time.perf_counter() - t0
        candidates = results[self.root][0]
        if self.sampler.mode == "greedy":
            nxt = candidates[0].token
        else:
            top = candidates[: self.sampler.k]
            nxt = sample_from_candidates([e.token for e in top], [e.logit for e in top], self.sampler, self.steps)
        metrics = self.transport.step_records()
        self.steps += 1
        return StepResult(nxt, candidates, [r[1] for r in results], metrics, seconds)

    def generate(self, prompt, n_out: int) -> list[int]:
        """Feed ``prompt`` one token per step, then emit ``n_out`` tokens."""
        prompt = list(prompt)
        if not prompt:
            raise ConfigError("prompt must be non-empty")
        out: list[int] = []
        result = None
        for tok in prompt:
            result = self.step(tok)
        for i in range(n_out):
            out.append(result.token)
            if i < n_out - 1:
                result = self.step(result.token)
        self.transport.flush()
        return out


def distributed_decode_step(decoder: DistributedDecoder, token: int) -> StepResult:
    return decoder.step(token)


def reference_stream(model, prompt, n_out: int, sampler: SamplerConfig | None = None) -> list[int]:
    """Single-process token stream produced the same way as :meth:`DistributedDecoder.generate`."""
    from .model import sample

    sampler = sampler or SamplerConfig()
    model.reset()
    logits = None
    step = 0
    for tok in prompt:
        logits = model.decode_step(tok)
        step += 1
    out = []
    for i in range(n_out):
        out.append(sample(logits, sampler, step - 1))
        if i < n_out - 1:
            logits = model.decode_step(out[-1])
            step += 1
    return out
