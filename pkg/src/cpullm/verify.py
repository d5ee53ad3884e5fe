"""Quick equivalence checks behind ``cpullm verify``.

Each check returns ``(passed, detail)``; :func:`run_all` prints one line per
check and reports the first failure by name. Sizes are kept small so the
whole suite finishes in well under a minute; the pytest acceptance module
runs the full-size versions.
"""

from __future__ import annotations

import numpy as np

from .attention import AttentionParams, ScoreBuffer, attention_flash, attention_naive, attention_slim
from .distributed import DistributedDecoder, local_topk, merge_topk, reference_stream
from .kvcache import Int8KvCache, KvCacheSpec, cache_bytes
from .model import Decoder, ModelConfig, synth_weights
from .tensor import dequantize, matmul, matmul_hybrid, quantize_rows_i8


def check_attention(cases: int = 40, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_slim = worst_flash = 0.0
    for _ in range(cases):
        lq, lk = sorted(int(x) for x in rng.integers(1, 33, 2))
        d = int(rng.choice([4, 8, 16]))
        causal = bool(rng.integers(2))
        if not causal:
            lq = int(rng.integers(1, 33))
        q, k, v = (rng.standard_normal((n, d)).astype(np.float32) for n in (lq, lk, lk))
        tile = int(rng.choice([1, 4, lk]))
        p = AttentionParams(d, causal=causal, slim_block_rows=int(rng.choice([1, 2, lq])),
                            flash_tile_q=tile, flash_tile_k=tile)
        ref = attention_naive(q, k, v, p)
        worst_slim = max(worst_slim, float(np.abs(attention_slim(q, k, v, p, ScoreBuffer(p.slim_block_rows, lk)) - ref).max()))
        worst_flash = max(worst_flash, float(np.abs(attention_flash(q, k, v, p) - ref).max()))
    return worst_slim <= 1e-5 and worst_flash <= 1e-4, f"slim {worst_slim:.2e} flash {worst_flash:.2e}"


def check_hybrid(cases: int = 100, seed: int = 1):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        m, k, n = (int(x) for x in rng.integers(1, 17, 3))
        a = rng.standard_normal((m, k)).astype(np.float32)
        q = quantize_rows_i8(rng.standard_normal((n, k)).astype(np.float32))
        if not np.array_equal(matmul_hybrid(a, q), matmul(a, dequantize(q), transpose_b=True)):
            return False, f"mismatch at m={m} k={k} n={n}"
    return True, f"{cases} cases bit-exact"


def check_kv_bound(slices: int = 200, seed: int = 2):
    rng = np.random.default_rng(seed)
    cache = Int8KvCache(1, 4, 32, slices)
    worst = 0.0
    for _ in range(slices):
        k = (rng.standard_normal((4, 32)) * rng.uniform(1e-3, 1e3, (4, 1))).astype(np.float32)
        pos = cache.append_token(0, 0, k, k)
        for h in range(4):
            got = dequantize(cache.read_head(0, 0, h, pos + 1))[pos].astype(np.float64)
            absmax = float(np.abs(k[h]).max())
            worst = max(worst, float(np.abs(got - k[h]).max()) / (absmax / 254))
    return worst <= 1 + 2**-20, f"worst error / (absmax/254) = {worst:.6f}"


def check_planner():
    got = cache_bytes(KvCacheSpec(256, 1024, 1024, 32, 32, 128, 2))
    return got == 274_877_906_944, f"{got} bytes"


def check_prefill_decode(seed: int = 3):
    cfg = ModelConfig()
    model = Decoder(cfg, seed=seed)
    tokens = [int(t) for t in np.random.default_rng(seed).integers(0, cfg.vocab, 12)]
    full = model.prefill(tokens)
    model.reset()
    model.prefill(tokens[:5])
    for t in tokens[5:]:
        logits = model.decode_step(t)
    err = float(np.abs(logits - full).max())
    return err <= 1e-4, f"max abs {err:.2e}"


def check_distributed(seeds=(0, 1), steps: int = 8):
    cfg = ModelConfig()
    for seed in seeds:
        weights = synth_weights(cfg, seed)
        prompt = [int(t) for t in np.random.default_rng(seed).integers(0, cfg.vocab, 4)]
        ref = reference_stream(Decoder(cfg, weights), prompt, steps)
        for w in (1, 2, 4):
            with DistributedDecoder(cfg, w, weights=weights) as dd:
                if dd.generate(prompt, steps) != ref:
                    return False, f"seed {seed}: {w} workers diverge"
    return True, f"{len(seeds)} seeds x workers {{1,2,4}} identical"


def check_topk_merge(cases: int = 200, seed: int = 4):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        vocab = int(rng.integers(4, 200))
        logits = np.round(rng.standard_normal(vocab), 1).astype(np.float32)  # rounding forces ties
        cuts = np.sort(rng.choice(np.arange(1, vocab), size=int(rng.integers(0, min(6, vocab - 1))), replace=False))
        bounds = [0, *cuts.tolist(), vocab]
        k = int(rng.integers(1, vocab + 1))
        lists = [local_topk(logits[lo:hi], k, lo) for lo, hi in zip(bounds, bounds[1:])]
        want = sorted(range(vocab), key=lambda t: (-float(logits[t]), t))[:k]
        if [e.token for e in merge_topk(lists, k)] != want:
            return False, f"vocab={vocab} k={k}"
    return True, f"{cases} shardings exact"


def check_comm_reduction():
    cfg = ModelConfig()
    weights = synth_weights(cfg, 0)
    out = {}
    for label, kw in (("opt", dict(token_mode="token", logit_mode="topk")),
                      ("base", dict(token_mode="embedding", logit_mode="allreduce"))):
        with DistributedDecoder(cfg, 2, weights=weights, k=8, **kw) as dd:
            dd.step(1)
            out[label] = {c: dd.transport.bytes_sent(collective=c)
                          for c in ("broadcast_token", "broadcast_embedding", "gather_topk", "allreduce_logits")}
    bcast = out["base"]["broadcast_embedding"] / out["opt"]["broadcast_token"]
    logits = out["base"]["allreduce_logits"] / out["opt"]["gather_topk"]
    return bcast >= 32 and logits >= 10, f"broadcast {bcast:.0f}x, logits {logits:.0f}x"


def check_zero_copy():
    cfg = ModelConfig()
    weights = synth_weights(cfg, 0)
    results = {}
    for zc in (True, False):
        with DistributedDecoder(cfg, 2, weights=weights, zero_copy=zc) as dd:
            r = dd.step(3)
            results[zc] = (r.logits, dd.transport.copy_count(worker=0))
    same = np.array_equal(results[True][0], results[False][0])
    ok = same and results[True][1] == 0 and results[False][1] == 2 * cfg.layers
    return ok, f"copies zero-copy={results[True][1]} staging={results[False][1]} identical={same}"


CHECKS = {
    "attention_equivalence": check_attention,
    "hybrid_matmul_exact": check_hybrid,
    "kv_quant_bound": check_kv_bound,
    "kv_planner": check_planner,
    "prefill_decode_consistency": check_prefill_decode,
    "distributed_exactness": check_distributed,
    "topk_merge_exact": check_topk_merge,
    "communication_reduction": check_comm_reduction,
    "zero_copy": check_zero_copy,
}


def run_all(echo=print) -> str | None:
    """Run every check; return the name of the first failing one (or ``None``)."""
    failed = None
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        echo(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        if not ok and failed is None:
            failed = name
    return failed
