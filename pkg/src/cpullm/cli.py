"""Command-line entry point: ``cpullm bench ...`` and ``cpullm verify``.

Exit status: 0 when every gate passes, 1 when a correctness check fails,
2 for configuration or capacity errors.
"""

from __future__ import annotations

import argparse
import sys

from .bench import attention_summary, cli_bench_attention, cli_distributed, cli_kv_plan, cli_throughput
from .errors import CapacityError, ConfigError, CorrectnessError
from .kvcache import KvCacheSpec
from .model import ModelConfig

PRESETS = {
    "toy": {},
    "tiny": dict(layers=1, d_model=32, n_head=2, n_kv_head=1, head_size=16, ffn_dim=64, vocab=64),
}


def parse_config(text: str) -> ModelConfig:
    """``toy``, ``tiny``, or comma-separated ``field=value`` overrides (optionally after a preset)."""
    fields: dict = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            if part not in PRESETS:
                raise ConfigError(f"unknown preset {part!r}; choose from {sorted(PRESETS)}")
            fields.update(PRESETS[part])
            continue
        key, value = part.split("=", 1)
        if key not in ModelConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config field {key!r}")
        default = ModelConfig.__dataclass_fields__[key].default
        fields[key] = type(default)(value)
    return ModelConfig(**fields)


def int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _common(p: argparse.ArgumentParser, reps=10, warmup=3) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=reps)
    p.add_argument("--warmup", type=int, default=warmup)
    p.add_argument("--csv", metavar="PATH", help="also write the report as CSV")
    p.add_argument("--config", default="toy", help="preset name or field=value list")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpullm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run a benchmark experiment")
    bsub = bench.add_subparsers(dest="experiment", required=True)

    att = bsub.add_parser("attention", help="attention latency vs. input length")
    _common(att)
    att.add_argument("--lengths", type=int_list, default=[256, 512, 1024, 2048])
    att.add_argument("--kernels", default="flash,slim,naive")
    att.add_argument("--head-size", type=int, default=64)
    att.add_argument("--slim-block-rows", type=int, default=64)
    att.add_argument("--flash-tile", type=int, default=64)
    att.add_argument("--no-causal", action="store_true")

    thr = bsub.add_parser("throughput", help="next-token throughput vs. batch size")
    _common(thr, reps=1, warmup=0)
    thr.add_argument("--batch", type=int_list, default=[8, 16])
    thr.add_argument("--in-len", type=int, default=16)
    thr.add_argument("--out-len", type=int, default=16)
    thr.add_argument("--cache-dtype", choices=["f32", "int8"], default="int8")

    dist = bsub.add_parser("distributed", help="tensor-parallel decode latency and traffic")
    _common(dist)
    dist.add_argument("--workers", type=int_list, default=[1, 2, 4])
    dist.add_argument("--steps", type=int, default=16)
    dist.add_argument("-k", type=int, default=8)
    dist.add_argument("--metrics-csv", metavar="PATH", help="per-step transport counters (optimized mode)")

    kv = bsub.add_parser("kv-plan", help="KV-cache volume planner")
    kv.add_argument("-b", type=int, default=256)
    kv.add_argument("--L-i", dest="L_i", type=int, default=1024)
    kv.add_argument("--L-o", dest="L_o", type=int, default=1024)
    kv.add_argument("-l", type=int, default=32)
    kv.add_argument("--n-head", type=int, default=32)
    kv.add_argument("--s-head", type=int, default=128)
    kv.add_argument("--s-d", type=int, default=2)
    kv.add_argument("--scale-bytes", type=int, default=4)
    kv.add_argument("--weight-params", type=float, default=None, help="model parameter count for the weight-traffic line")
    kv.add_argument("--csv", metavar="PATH")

    sub.add_parser("verify", help="run every equivalence suite")
    return parser


def _emit(report, args, summary: str | None = None) -> None:
    if summary:
        print(summary)
        print()
    print(report.to_text())
    if getattr(args, "csv", None):
        report.write_csv(args.csv)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            from .verify import run_all

            failed = run_all()
            if failed:
                print(f"verify failed: {failed}", file=sys.stderr)
                return 1
            return 0

        if args.experiment == "attention":
            report = cli_bench_attention(
                args.lengths, tuple(k for k in args.kernels.split(",") if k), args.reps, args.warmup, args.seed,
                head_size=args.head_size, causal=not args.no_causal,
                slim_block_rows=args.slim_block_rows, flash_tile=args.flash_tile,
            )
            _emit(report, args, attention_summary(report))
        elif args.experiment == "throughput":
            report = cli_throughput(args.batch, args.in_len, args.out_len, args.cache_dtype, args.seed,
                                    reps=args.reps, warmup=args.warmup, config=parse_config(args.config))
            _emit(report, args)
        elif args.experiment == "distributed":
            from .distributed import DistributedDecoder

            config = parse_config(args.config)
            report = cli_distributed(args.workers, args.steps, args.k, args.seed, config=config)
            _emit(report, args)
            if args.metrics_csv:
                with DistributedDecoder(config, max(args.workers), seed=args.seed, k=args.k) as dd:
                    dd.generate([1, 2, 3, 4], args.steps)
                    dd.transport.write_csv(args.metrics_csv)
        elif args.experiment == "kv-plan":
            spec = KvCacheSpec(args.b, args.L_i, args.L_o, args.l, args.n_head, args.s_head, args.s_d)
            weight_params = int(args.weight_params) if args.weight_params else None
            _emit(cli_kv_plan(spec, args.scale_bytes, weight_params), args)
    except CorrectnessError as exc:
        print(f"FAIL {exc.check}: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, CapacityError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
