"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``ACCEPTANCE <n>: PASS|FAIL`` line (visible even
without ``-s``) and then asserts.
"""

import time

import numpy as np
import pytest

from cpullm.attention import AttentionParams, ScoreBuffer, attention_flash, attention_naive, attention_slim
from cpullm.bench import ATTENTION_REFERENCE, cli_bench_attention
from cpullm.distributed import DistributedDecoder, local_topk, merge_topk, reference_stream
from cpullm.kvcache import Int8KvCache, KvCacheSpec, cache_bytes
from cpullm.model import Decoder, ModelConfig, synth_weights
from cpullm.tensor import dequantize, matmul, matmul_hybrid, quantize_rows_i8

LLAMA_7B = dict(b=256, L_i=1024, L_o=1024, l=32, n_head=32, s_head=128, s_d=2)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def attention_cases(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        causal = bool(rng.integers(2))
        lq, lk = (int(x) for x in rng.integers(1, 65, 2))
        if causal and lq > lk:
            lq, lk = lk, lq
        d = int(rng.choice([4, 8, 16]))
        q, k, v = (rng.standard_normal((m, d)).astype(np.float32) for m in (lq, lk, lk))
        yield q, k, v, causal


def test_1_slim_equivalence(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for q, k, v, causal in attention_cases(200, seed=101):
        lq, lk, d = q.shape[0], k.shape[0], q.shape[1]
        ref = attention_naive(q, k, v, AttentionParams(d, causal=causal))
        for rows in (1, 2, lq):
            p = AttentionParams(d, causal=causal, slim_block_rows=rows)
            out = attention_slim(q, k, v, p, ScoreBuffer(rows, lk))
            worst = max(worst, float(np.abs(out - ref).max()))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-5 and elapsed < 10, f"max-abs {worst:.2e} (<= 1e-5) in {elapsed:.2f}s (< 10s)")


def test_2_flash_equivalence(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for q, k, v, causal in attention_cases(200, seed=102):
        lk, d = k.shape[0], q.shape[1]
        ref = attention_naive(q, k, v, AttentionParams(d, causal=causal))
        for tile in (1, 4, lk):
            p = AttentionParams(d, causal=causal, flash_tile_q=tile, flash_tile_k=tile)
            worst = max(worst, float(np.abs(attention_flash(q, k, v, p) - ref).max()))
    # stability: scores spanning roughly [-40, 40]
    rng = np.random.default_rng(103)
    q, k, v = (rng.standard_normal((48, 16)).astype(np.float32) for _ in range(3))
    p = AttentionParams(16, flash_tile_q=4, flash_tile_k=4)
    scores = (q @ k.T) * p.softmax_scale
    q *= np.float32(40.0 / np.abs(scores).max())
    span = float(np.abs((q @ k.T) * p.softmax_scale).max())
    stress = attention_flash(q, k, v, p)
    stress_err = float(np.abs(stress - attention_naive(q, k, v, p)).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and stress_err <= 1e-4 and np.all(np.isfinite(stress)) and span >= 39.9 and elapsed < 10
    verdict(2, ok, f"sweep max-abs {worst:.2e}, +/-{span:.1f} case {stress_err:.2e} (<= 1e-4) in {elapsed:.2f}s (< 10s)")


def test_3_int8_cache_bound(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(104)
    n_head, s_head, tokens = 4, 64, 250  # 1,000 (token, head) slices
    cache = Int8KvCache(1, n_head, s_head, tokens)
    data = []
    for _ in range(tokens):
        mags = 10.0 ** rng.uniform(-4, 4, (n_head, 1))
        k = (rng.standard_normal((n_head, s_head)) * mags).astype(np.float32)
        cache.append_token(0, 0, k, k)
        data.append(k)
    data = np.stack(data)
    violations = 0
    for h in range(n_head):
        got = dequantize(cache.read_head(0, 0, h, tokens)).astype(np.float64)
        x = data[:, h].astype(np.float64)
        bound = np.abs(x).max(axis=1, keepdims=True) / 254
        violations += int(np.sum(np.abs(x - got) > bound))

    # isolation probes: blowing up one head must leave the other heads' bytes and scales untouched
    isolated = True
    probe = rng.standard_normal((n_head, s_head)).astype(np.float32)
    ref = Int8KvCache(1, n_head, s_head, 1)
    ref.append_token(0, 0, probe, probe)
    for h in range(n_head):
        hot = probe.copy()
        hot[h] *= 1e4
        c = Int8KvCache(1, n_head, s_head, 1)
        c.append_token(0, 0, hot, hot)
        for other in set(range(n_head)) - {h}:
            a, b = c.read_head(0, 0, other, 1), ref.read_head(0, 0, other, 1)
            isolated &= np.array_equal(a.values, b.values) and np.array_equal(a.scales, b.scales)
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and isolated and elapsed < 5
    verdict(3, ok, f"{violations} of {tokens * n_head * s_head} elements over absmax/254, "
                   f"isolation {'held' if isolated else 'broken'}, {elapsed:.2f}s (< 5s)")


def test_4_planner(verdict):
    base = cache_bytes(KvCacheSpec(**LLAMA_7B))
    probes = []
    for field in ("b", "l", "n_head", "s_head", "s_d"):
        for factor in (2, 3):
            spec = KvCacheSpec(**{**LLAMA_7B, field: LLAMA_7B[field] * factor})
            probes.append(cache_bytes(spec) == base * factor)
    # the sequence enters only through L_i + L_o, linearly
    step = cache_bytes(KvCacheSpec(**{**LLAMA_7B, "L_i": 1025})) - base
    for L_i, L_o in ((1, 1023), (2047, 1), (4096, 4096), (1500, 548)):
        got = cache_bytes(KvCacheSpec(**{**LLAMA_7B, "L_i": L_i, "L_o": L_o}))
        probes.append(got == step * (L_i + L_o))
    probes.append(step == cache_bytes(KvCacheSpec(**{**LLAMA_7B, "L_o": 1025})) - base)
    # the commonly quoted ~128 GB matches a total sequence of 1024 (see kvcache module docs)
    half = cache_bytes(KvCacheSpec(**{**LLAMA_7B, "L_i": 512, "L_o": 512}))
    ok = base == 274_877_906_944 and all(probes) and half == 128 * 2**30
    verdict(4, ok, f"cache_bytes = {base:,} (256 GiB); seq 1024 gives {half / 2**30:.0f} GiB; "
                   f"{sum(probes)}/{len(probes)} linearity probes")


def test_5_hybrid_matmul(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(105)
    mismatches = gemv = 0
    for i in range(500):
        m = 1 if i % 4 == 0 else int(rng.integers(1, 33))
        k, n = (int(x) for x in rng.integers(1, 129, 2))
        gemv += m == 1
        a = rng.standard_normal((m, k)).astype(np.float32)
        q = quantize_rows_i8((rng.standard_normal((n, k)) * 10.0 ** rng.uniform(-3, 3)).astype(np.float32))
        mismatches += not np.array_equal(matmul_hybrid(a, q), matmul(a, dequantize(q), transpose_b=True))
        p = rng.standard_normal((m, n)).astype(np.float32)
        mismatches += not np.array_equal(matmul_hybrid(p, q, transpose=False), matmul(p, dequantize(q)))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 5
    verdict(5, ok, f"{mismatches} mismatches over 500 cases x 2 layouts ({gemv} gemv), {elapsed:.2f}s (< 5s)")


def test_6_end_to_end_precision(verdict):
    matches, worst, worst_seed = 0, 0.0, None
    cfg = ModelConfig(layers=2, d_model=64, vocab=256, max_seq=40)
    cfg8 = ModelConfig(layers=2, d_model=64, vocab=256, max_seq=40, cache_dtype="int8")
    for seed in range(100):
        w = synth_weights(cfg, seed)
        prompt = [int(t) for t in np.random.default_rng(seed).integers(0, 256, 8)]
        f32, i8 = Decoder(cfg, w), Decoder(cfg8, w)
        lf, li = f32.prefill(prompt), i8.prefill(prompt)
        same = True
        for step in range(32):
            worst_here = float(np.abs(lf - li).max())
            if worst_here > worst:
                worst, worst_seed = worst_here, seed
            tok = int(np.argmax(lf))
            same &= int(np.argmax(li)) == tok
            if step < 31:
                # teacher forcing: both caches see the f32 stream, so per-step logits stay comparable
                lf, li = f32.decode_step(tok), i8.decode_step(tok)
        # the free-running INT8 stream equals the f32 stream exactly when every forced argmax agreed
        matches += same
    ok = matches >= 95 and worst <= 0.05
    verdict(6, ok, f"greedy streams identical on {matches}/100 seeds (>= 95); "
                   f"worst per-step logit diff {worst:.4f} (<= 0.05, seed {worst_seed})")


def test_7_distributed_exactness(verdict):
    cfg = ModelConfig()
    diverged = []
    for seed in range(10):
        w = synth_weights(cfg, seed)
        prompt = [int(t) for t in np.random.default_rng(seed).integers(0, cfg.vocab, 4)]
        ref = reference_stream(Decoder(cfg, w), prompt, 16)
        for n in (1, 2, 4):
            with DistributedDecoder(cfg, n, weights=w) as dd:
                if dd.generate(prompt, 16) != ref:
                    diverged.append((seed, n))
    rng = np.random.default_rng(107)
    merge_fail = 0
    for _ in range(1000):
        vocab = int(rng.integers(2, 300))
        logits = np.round(rng.standard_normal(vocab), 1).astype(np.float32)  # coarse rounding forces ties
        n_cuts = int(rng.integers(0, min(8, vocab - 1) + 1))
        cuts = np.sort(rng.choice(np.arange(1, vocab), size=n_cuts, replace=False)).tolist()
        bounds = [0, *cuts, vocab]
        k = int(rng.integers(1, vocab + 1))
        lists = [local_topk(logits[lo:hi], k, lo) for lo, hi in zip(bounds, bounds[1:])]
        want = sorted(range(vocab), key=lambda t: (-float(logits[t]), t))[:k]
        merge_fail += [e.token for e in merge_topk(lists, k, list(zip(bounds, bounds[1:])))] != want
    ok = not diverged and merge_fail == 0
    verdict(7, ok, f"10 seeds x workers {{1,2,4}} x 16 steps: {len(diverged)} divergent; "
                   f"merge_topk: {merge_fail}/1000 shardings wrong")


def step_traffic(cfg, n, k, token_mode, logit_mode):
    with DistributedDecoder(cfg, n, seed=0, k=k, token_mode=token_mode, logit_mode=logit_mode) as dd:
        dd.step(1)
        t = dd.transport
        return {c: t.bytes_sent(collective=c)
                for c in ("broadcast_token", "broadcast_embedding", "gather_topk", "allreduce_logits")}


def test_8_communication_reduction(verdict):
    cfg = ModelConfig(d_model=64, vocab=256)
    opt = step_traffic(cfg, 2, 8, "token", "topk")
    base = step_traffic(cfg, 2, 8, "embedding", "allreduce")
    bcast = base["broadcast_embedding"] / opt["broadcast_token"]
    logits = base["allreduce_logits"] / opt["gather_topk"]
    # extrapolation to a production vocabulary, measured on the same transport
    big = ModelConfig(d_model=64, vocab=32000, layers=1)
    big_opt = step_traffic(big, 2, 50, "token", "topk")
    big_base = step_traffic(big, 2, 50, "embedding", "allreduce")
    savings = 1 - big_opt["gather_topk"] / big_base["allreduce_logits"]
    ok = bcast >= 32 and logits >= 10 and savings >= 0.99
    verdict(8, ok, f"token vs embedding broadcast {bcast:.0f}x (>= 32); top-8 vs logit allreduce {logits:.0f}x "
                   f"(>= 10); vocab 32000 / k=50: {big_opt['gather_topk']} vs {big_base['allreduce_logits']} "
                   f"bytes, {savings:.2%} saved (>= 99%)")


def test_9_zero_copy(verdict):
    cfg = ModelConfig()
    w = synth_weights(cfg, 9)
    per_step, logits = {}, {}
    for zc in (True, False):
        with DistributedDecoder(cfg, 2, weights=w, zero_copy=zc) as dd:
            results = [dd.step(t) for t in (5, 17, 42, 99)]
        logits[zc] = [r.logits for r in results]
        per_step[zc] = {
            (i, worker): sum(m.copy_count for m in r.metrics if m.worker == worker)
            for i, r in enumerate(results) for worker in range(2)
        }
        collectives = {
            (i, worker): sum(1 for m in r.metrics if m.worker == worker and m.collective == "allreduce")
            for i, r in enumerate(results) for worker in range(2)
        }
    reductions = 2 * cfg.layers  # attention output and FFN down projection per layer
    zero_ok = set(per_step[True].values()) == {0}
    staging_ok = set(per_step[False].values()) == {reductions}
    same = all(np.array_equal(a, b) for a, b in zip(logits[True], logits[False]))
    ok = zero_ok and staging_ok and same and set(collectives.values()) == {1}
    verdict(9, ok, f"copies/step zero-copy {sorted(set(per_step[True].values()))}, staging "
                   f"{sorted(set(per_step[False].values()))} (expected {reductions}); outputs identical: {same}")


def test_10_attention_benchmark_shape(verdict):
    lengths = [256, 512, 1024, 2048]
    report = cli_bench_attention(lengths, reps=1, warmup=0)
    shaped = True
    for L in lengths:
        p = {"input": L, "head_size": 64, "causal": 1}
        shaped &= report.value("slim_check", **p) == "PASS" and report.value("flash_check", **p) == "PASS"
        shaped &= all(report.value(f"{kern}_ms", **p) > 0 for kern in ("flash", "slim", "naive"))
        shaped &= report.value("slim_faster_than_flash", **p) in ("yes", "no")
    footers_ok = report.footers == ATTENTION_REFERENCE
    faster = [report.value("slim_faster_than_flash", input=L, head_size=64, causal=1) for L in lengths]
    verdict(10, shaped and footers_ok,
            f"gates PASS at {lengths}; reference footers attached; slim faster than flash: {faster}")
