"""Command-line entry points: simulate, slice-sweep, bench, gen-dump.

Exit codes: 0 success, 2 bad configuration or arguments, 3 a run-time
invariant was violated (nodes diverged, protocol mismatch).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import BENCH_COLUMNS, bench, format_table
from .config import ConfigError, RunConfig, from_dict, load_config
from .pipeline import InvariantError, ToyFeed, make_feed, simulate
from .sources import DumpFormatError, DumpReader, DumpWriter
from .sources.toy import CONV
from .sweep import SWEEP_COLUMNS, dump_samples, slice_sweep, toy_samples

log = logging.getLogger("gradiveq")

EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, default=Path("runs"))
    p.add_argument("--mode", choices=("raw", "gvq", "scalar", "all"))
    p.add_argument("--transport", choices=("inproc", "tcp"))
    p.add_argument("--nodes", type=int)
    p.add_argument("--scale", type=float, help="multiplies the warm-up length")
    p.add_argument("--iterations", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    return cfg.with_overrides(seed=args.seed, mode=args.mode, transport=args.transport, nodes=args.nodes,
                              scale=args.scale, iterations=args.iterations)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    results = simulate(cfg, args.out_dir)
    for r in results:
        m = r.summary["modes"].get(r.mode, {})
        line = {"mode": r.mode, "total_bytes": m.get("total_bytes"),
                "mean_ratio_compressed": m.get("mean_ratio_compressed"), "stops": r.stops}
        if r.train_loss is not None:
            line["train_loss"] = r.train_loss
        print(json.dumps(line))
    return 0


def cmd_slice_sweep(args) -> int:
    sizes = [int(k) for k in args.slice_sizes.split(",") if k]
    rows = []
    if args.source == "dump":
        if args.dump is None:
            raise ConfigError("--dump", "a dump source needs a path")
        reader = DumpReader(args.dump)
        samples = dump_samples(reader, args.layer, args.start, args.samples)
        rows += [["0"] + p.to_csv() for p in slice_sweep(samples, sizes, args.loss_threshold)]
    else:
        cfg = _config(args)
        for k in range(args.seeds):
            seed = cfg.seed + k
            src = cfg.source
            samples = toy_samples(seed, n_nodes=cfg.nodes, warmup=cfg.to_schedule().warmup,
                                  sample_iters=cfg.schedule.sample_iters, batch=src.batch, lr=src.lr,
                                  n_samples=src.samples, template_scale=src.template_scale,
                                  noise=src.image_noise, smoothness=src.smoothness, label_noise=src.label_noise)
            rows += [[str(seed)] + p.to_csv() for p in slice_sweep(samples, sizes, args.loss_threshold)]
    out = args.out_dir / "slice_sweep.csv"
    _write_csv(out, ("seed",) + SWEEP_COLUMNS, rows)
    by_k: dict = {}
    for r in rows:
        by_k.setdefault(int(r[1]), []).append(float(r[5]))
    for K, losses in sorted(by_k.items()):
        print(f"K={K:<5} median transfer loss {np.median(losses):.6g}")
    print(f"wrote {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    rows = bench(cfg)
    print(format_table(rows))
    out = args.out_dir / "bench.csv"
    _write_csv(out, BENCH_COLUMNS, [r.to_csv() for r in rows])
    print(f"wrote {out}")
    return 0


def cmd_gen_dump(args) -> int:
    cfg = _config(args)
    if cfg.source.kind == "replay":
        raise ConfigError("source.kind", "cannot generate a dump from a replay source")
    if cfg.source.kind == "synthetic" and cfg.source.passthrough:
        raise ConfigError("source.passthrough", "dumps hold convolutional layers only")
    feed = make_feed(cfg)
    layers = feed.layout.layers
    conv = feed.layout.conv_size
    out = args.output or args.out_dir / "grads.gvq"
    out.parent.mkdir(parents=True, exist_ok=True)
    with DumpWriter(out, layers, cfg.nodes, cfg.iterations) as w:
        for t in range(cfg.iterations):
            grads = feed.gradients(t)
            for g in grads:
                w.write(g[:conv])
            if isinstance(feed, ToyFeed):
                feed.update(t, [np.sum(np.stack(grads), axis=0)] * cfg.nodes)
    print(f"wrote {out} ({cfg.iterations} iterations x {cfg.nodes} nodes x {conv} values)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradiveq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the full aggregation pipeline and write metrics")
    _shared(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("slice-sweep", help="compressor transfer loss against slice size")
    _shared(p)
    p.add_argument("--source", choices=("toy", "dump"), default="toy")
    p.add_argument("--dump", type=Path)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--start", type=int, default=0, help="first dump iteration to sample")
    p.add_argument("--samples", type=int, help="dump iterations to sample (default: all)")
    p.add_argument("--slice-sizes", default=f"16,24,40,48,{CONV.size}")
    p.add_argument("--lambda", dest="loss_threshold", type=float, default=0.1)
    p.add_argument("--seeds", type=int, default=1, help="toy source: consecutive seeds from --seed")
    p.set_defaults(func=cmd_slice_sweep)

    p = sub.add_parser("bench", help="bytes and simulated time per mode for one compressed iteration")
    _shared(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-dump", help="write source gradients to a GVQ1 dump")
    _shared(p)
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_gen_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DumpFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
