"""Time the numba-jitted kernels against the pure-numpy fallback.

The backend is fixed per process at import time (QUANTIMP_BACKEND), so this
script re-executes itself in a subprocess per backend and prints one
comparison table. Timings cover the full training step (bidirectional
forward + backpropagation through time + optimizer update) and inference
on the built-in synthetic benchmark.

Usage: python benchmarks/bench_backends.py [--steps 2000] [--features 10]
       [--epochs 5] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def measure(args):
    import numpy as np

    import quantimp as qi
    from quantimp._backend import BACKEND
    from quantimp.evaluation import impute_series

    ds = qi.make_synthetic(n_steps=args.steps, n_features=args.features,
                           seed=7)
    split = qi.make_mcar_split(ds, 0.5, seed=1)
    cfg = qi.TrainConfig(epochs=args.epochs, seed=1, batch_size=8)

    # one throwaway epoch so JIT compilation is not billed to the timing
    warm = qi.TrainConfig(epochs=1, seed=1, batch_size=8)
    qi.train(ds, split, warm)

    train_times = []
    infer_times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        res = qi.train(ds, split, cfg)
        train_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        impute_series(res.model, ds.values, split.train_mask, ds.timestamps,
                      res.stats, cfg.window_length)
        infer_times.append(time.perf_counter() - t0)
    print(json.dumps({
        "backend": BACKEND,
        "train_s": min(train_times),
        "infer_s": min(infer_times),
        "epochs": args.epochs,
    }))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--features", type=int, default=10)
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--measure", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.measure:
        measure(args)
        return

    results = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, QUANTIMP_BACKEND=backend)
        cmd = [sys.executable, os.path.abspath(__file__), "--measure",
               "--steps", str(args.steps), "--features", str(args.features),
               "--epochs", str(args.epochs), "--repeat", str(args.repeat)]
        out = subprocess.run(cmd, env=env, capture_output=True, text=True)
        if out.returncode != 0:
            print(f"{backend} run failed:\n{out.stderr}", file=sys.stderr)
            continue
        results[backend] = json.loads(out.stdout.strip().splitlines()[-1])

    if not results:
        sys.exit(1)
    print(f"{'backend':8s} {'train s':>10s} {'infer s':>10s}")
    for backend, row in results.items():
        print(f"{backend:8s} {row['train_s']:10.3f} {row['infer_s']:10.3f}")
    if len(results) == 2:
        speed = results["numpy"]["train_s"] / results["numba"]["train_s"]
        print(f"numba speedup over numpy (train): {speed:.1f}x")


if __name__ == "__main__":
    main()
