"""Command line interface: run, eval, export, bench.

Exit codes: 0 success, 1 fatal error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys

from featsense.config import load_config
from featsense.errors import ConfigError, FeatSenseError


def _cmd_run(args) -> int:
    from featsense import pipeline
    cfg = load_config(args.config)
    if args.debug_images:
        cfg.debug_image_dir = args.debug_images
    traj, stats = pipeline.run(cfg)
    print(stats.table())
    print(f"trajectory: {cfg.out_trajectory} ({len(traj)} poses)")
    print(f"map store:  {cfg.out_map}")
    return 0


def _cmd_eval(args) -> int:
    from featsense.eval import associate, ate
    from featsense.scan_io import read_trajectory
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    pairs = associate(est, gt, args.max_dt)
    report = ate(pairs, aligned=args.align)
    print(report.as_text())
    print()
    print(report.as_kv(), end="")
    return 0


def _cmd_export(args) -> int:
    from featsense import tsdf
    store = tsdf.MapStore.open(args.map)
    vol = store.bounding_volume()
    points = tsdf.export_zero_crossings(vol)
    tsdf.write_ply(points, args.out)
    print(f"wrote {len(points)} points to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    from featsense import pipeline
    from featsense.backend import BACKEND
    cfg = load_config(args.config)
    threads = [int(t) for t in args.threads.split(",") if t]
    rows = pipeline.bench(cfg, threads)
    print(f"backend: {BACKEND}")
    print(pipeline.bench_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="featsense",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process a dataset")
    run.add_argument("--config", required=True)
    run.add_argument("--debug-images", default="",
                     help="dump pipeline images as PGM into this directory")
    run.set_defaults(fn=_cmd_run)

    ev = sub.add_parser("eval", help="trajectory error metrics")
    ev.add_argument("--est", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--align", action="store_true")
    ev.add_argument("--max-dt", type=float, default=0.02)
    ev.set_defaults(fn=_cmd_eval)

    ex = sub.add_parser("export", help="zero-crossing PLY from a map store")
    ex.add_argument("--map", required=True)
    ex.add_argument("--out", required=True)
    ex.set_defaults(fn=_cmd_export)

    be = sub.add_parser("bench", help="TSDF generation timing per thread count")
    be.add_argument("--config", required=True)
    be.add_argument("--threads", default="1,2,4,8")
    be.set_defaults(fn=_cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FeatSenseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
