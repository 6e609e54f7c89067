#!/usr/bin/env python3
"""Benchmark the numba and pure-numpy TSDF ray-march backends.

Runs the same synthetic mapping workload once per backend in a fresh
subprocess (the backend is frozen at import time via FEATSENSE_BACKEND),
reports per-frame timing and verifies the produced volumes are
bit-identical.

Usage:
    python3 benchmarks/compare_backends.py [--frames N] [--rows R] [--cols C]
"""

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time


def worker(args):
    import numpy as np

    from featsense import tsdf
    from featsense.backend import BACKEND
    from featsense.scan_io import Pose
    from featsense.synth import box_room, simulate_scan

    geom = tsdf.GridGeometry.centered(
        np.zeros(3), (12.0, 12.0, 6.0), 0.064, 0.3, 32)
    vol = tsdf.TsdfVolume(geom, 1024)
    params = tsdf.TsdfParams(tau=0.3)
    scene = box_room(size=10.0, height=4.0)

    poses = [Pose(np.array([0, 0, 0, 1.0]),
                  np.array([0.1 * i, 0.05 * i, 0.0]), 0.1 * i)
             for i in range(args.frames)]
    scans = [simulate_scan(scene, p, rows=args.rows, cols=args.cols,
                           vfov=40.0, noise_sigma=0.003,
                           rng=np.random.default_rng(7)) for p in poses]

    # warm up once so numba JIT compilation is not timed
    cand, _ = tsdf.generate_candidate(scans[0], poses[0], geom, params)
    t0 = time.perf_counter()
    for scan, pose in zip(scans, poses):
        cand, _ = tsdf.generate_candidate(scan, pose, geom, params)
        tsdf.integrate(vol, cand)
    elapsed = time.perf_counter() - t0

    digest = hashlib.sha256(vol.cells.tobytes()).hexdigest()
    print(json.dumps({"backend": BACKEND, "seconds": elapsed,
                      "frames": args.frames, "sha256": digest}))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--rows", type=int, default=32)
    ap.add_argument("--cols", type=int, default=256)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        worker(args)
        return

    results = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, FEATSENSE_BACKEND=backend)
        cmd = [sys.executable, os.path.abspath(__file__), "--worker",
               "--frames", str(args.frames), "--rows", str(args.rows),
               "--cols", str(args.cols)]
        out = subprocess.run(cmd, env=env, capture_output=True, text=True)
        if out.returncode != 0:
            print(f"{backend}: failed\n{out.stderr}", file=sys.stderr)
            sys.exit(1)
        results[backend] = json.loads(out.stdout.strip().splitlines()[-1])

    np_s = results["numpy"]["seconds"]
    nb_s = results["numba"]["seconds"]
    frames = results["numpy"]["frames"]
    print(f"workload: {frames} frames, {args.rows}x{args.cols} scan, "
          f"12x12x6 m volume @ 64 mm")
    print(f"{'backend':8s} {'total s':>9s} {'ms/frame':>9s}")
    for b in ("numpy", "numba"):
        s = results[b]["seconds"]
        print(f"{b:8s} {s:9.3f} {1e3 * s / frames:9.1f}")
    print(f"speedup (numba vs numpy): {np_s / nb_s:.2f}x")
    match = results["numpy"]["sha256"] == results["numba"]["sha256"]
    print(f"volumes bit-identical: {match}")
    sys.exit(0 if match else 1)


if __name__ == "__main__":
    main()
