#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times the two data-movement primitives and a full conv3d
forward+backward step for both backends. Run:

    python benchmarks/bench_kernels.py

The backend is chosen per subprocess via MTSR_KERNEL_BACKEND, so this
script re-executes itself once per backend.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np

SHAPES = [
    # (label, x shape, kernel dhw, stride)
    ("up-block 32x32", (16, 8, 3, 34, 34), (3, 3, 3), (1, 1, 1)),
    ("zipper 32x32", (16, 16, 1, 34, 34), (1, 3, 3), (1, 1, 1)),
    ("disc stride-2", (16, 16, 1, 34, 34), (1, 3, 3), (1, 2, 2)),
    ("up-block 80x80", (4, 8, 6, 82, 82), (3, 3, 3), (1, 1, 1)),
]


def timeit(fn, repeats=10):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1000.0


def run_backend():
    import mtsr.kernels as kernels
    from mtsr import tensor as T

    rows = {"backend": kernels.BACKEND, "cases": []}
    rng = np.random.default_rng(0)
    for label, xshape, kdhw, stride in SHAPES:
        x = rng.normal(size=xshape).astype(np.float32)
        cols = kernels.vol2col(x, kdhw, stride)
        case = {
            "label": label,
            "vol2col_ms": timeit(lambda: kernels.vol2col(x, kdhw, stride)),
            "col2vol_ms": timeit(lambda: kernels.col2vol(cols, x.shape, kdhw, stride)),
        }
        cout = 8
        k = rng.normal(size=(cout, xshape[1]) + kdhw).astype(np.float32)
        xt = T.Tensor(x, requires_grad=True)
        kt = T.Tensor(k, requires_grad=True)

        def train_step():
            xt.grad = None
            kt.grad = None
            out = T.conv3d(xt, kt, stride=stride, padding=1)
            T.sum_(T.square(out)).backward()

        case["conv3d_fwd_bwd_ms"] = timeit(train_step, repeats=5)
        rows["cases"].append(case)
    print(json.dumps(rows))


def main():
    if os.environ.get("MTSR_KERNEL_BACKEND") in ("python", "compiled"):
        run_backend()
        return
    results = {}
    for backend in ("compiled", "python"):
        env = dict(os.environ, MTSR_KERNEL_BACKEND=backend)
        try:
            out = subprocess.run([sys.executable, __file__], env=env, check=True,
                                 capture_output=True, text=True).stdout
        except subprocess.CalledProcessError as exc:
            print(f"{backend}: unavailable ({exc.stderr.strip().splitlines()[-1]})")
            continue
        results[backend] = json.loads(out.strip().splitlines()[-1])

    if not results:
        return
    labels = [c["label"] for c in next(iter(results.values()))["cases"]]
    metrics = ["vol2col_ms", "col2vol_ms", "conv3d_fwd_bwd_ms"]
    print(f"{'case':<16}{'metric':<20}" + "".join(f"{b:>12}" for b in results) + f"{'speedup':>10}")
    for i, label in enumerate(labels):
        for metric in metrics:
            vals = [results[b]["cases"][i][metric] for b in results]
            line = f"{label:<16}{metric:<20}" + "".join(f"{v:>11.2f}m" for v in vals)
            if len(vals) == 2 and vals[0] > 0:
                line += f"{vals[1] / vals[0]:>9.2f}x"
            print(line)


if __name__ == "__main__":
    main()
