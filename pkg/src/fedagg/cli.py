"""fedagg command line: serve the aggregation service, simulate clients,
run fusion benchmarks, fuse a directory of updates offline, render reports.
"""

from __future__ import annotations

import argparse
import logging
import sys
import threading
from pathlib import Path

from . import codec
from .fusion import FusionAlgo, FusionConfig, sequential_fuse
from .simbench import (
    BENCH_ENGINES,
    BenchSettings,
    ModelSpec,
    bench_fusion,
    report,
    simulate_clients,
)
from .store import LocalDirStore, MemoryStore


def _cmd_serve(args) -> int:
    import uvicorn

    from .config import build_coordinator, load_config
    from .server import create_app

    cfg = load_config(args.config)
    coordinator = build_coordinator(cfg)
    app = create_app(coordinator)
    stop = threading.Event()
    loop = threading.Thread(target=coordinator.run_forever, args=(stop,), daemon=True)
    loop.start()
    host, _, port = args.listen.rpartition(":")
    try:
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
    finally:
        stop.set()
        coordinator.shutdown()
    return 0


def _resolve_target(target: str):
    if target.startswith(("http://", "https://")):
        return target
    if target == "memory":
        return MemoryStore()
    return LocalDirStore(Path(target))


def _cmd_simulate(args) -> int:
    spec = ModelSpec(name=args.model, scale=args.scale)
    stats = simulate_clients(
        args.parties,
        spec,
        _resolve_target(args.target),
        concurrency=args.concurrency,
        seed=args.seed,
        round_no=args.round,
    )
    for key, value in stats.summary().items():
        print(f"{key}: {value:.6f}" if isinstance(value, float) else f"{key}: {value}")
    if stats.failures:
        for cid, err in stats.failures[:20]:
            print(f"failed {cid}: {err}", file=sys.stderr)
        return 1
    return 0


def _cmd_bench(args) -> int:
    specs = [ModelSpec(name=m, scale=args.scale) for m in args.models.split(",")]
    parties = [int(p) for p in args.parties.split(",")]
    engines = args.engines.split(",")
    for engine in engines:
        if engine not in BENCH_ENGINES:
            raise SystemExit(f"unknown engine {engine!r}; choose from {BENCH_ENGINES}")
    settings = BenchSettings(workers=args.workers, seed=args.seed)
    if args.cores:
        settings.cores = args.cores
    rows = bench_fusion(specs, parties, engines, args.reps, args.out, settings)
    bad = [r for r in rows if r.error]
    print(f"wrote {len(rows)} rows to {args.out} ({len(bad)} errors)")
    return 1 if bad else 0


def _cmd_fuse(args) -> int:
    paths = sorted(Path(args.input).glob(f"*{codec.FILE_EXTENSION}"))
    if not paths:
        raise SystemExit(f"no {codec.FILE_EXTENSION} files under {args.input}")
    updates = [codec.decode_update(p.read_bytes()) for p in paths]
    cfg = FusionConfig(algo=FusionAlgo.from_label(args.algo), epsilon=args.epsilon)
    model = sequential_fuse(updates, cfg, round_no=args.round)
    Path(args.output).write_bytes(codec.encode_global(model))
    print(f"fused {len(updates)} updates -> {args.output}")
    return 0


def _cmd_report(args) -> int:
    rep = report(args.input, out_dir=args.out_dir)
    print(rep.text())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedagg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the aggregation service")
    p.add_argument("--config", default=None, help="YAML config path")
    p.add_argument("--listen", default="127.0.0.1:8080")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("simulate", help="simulate concurrent client writers")
    p.add_argument("--parties", type=int, required=True)
    p.add_argument("--model", default="cnn4.6")
    p.add_argument("--scale", type=float, default=0.01)
    p.add_argument("--target", required=True,
                   help="store directory, 'memory', or coordinator base URL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concurrency", type=int, default=16)
    p.add_argument("--round", type=int, default=0)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("bench", help="run the fusion benchmark matrix")
    p.add_argument("--models", default="cnn4.6")
    p.add_argument("--parties", default="10,100")
    p.add_argument("--engines", default="local,distributed")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--scale", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--cores", type=int, default=0)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("fuse", help="offline one-shot fusion of a directory of .fau files")
    p.add_argument("--algo", default="fedavg", choices=["fedavg", "iteravg"])
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("report", help="summarize a bench CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
