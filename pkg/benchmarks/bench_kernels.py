"""Time the depthwise-conv kernels on the compiled and pure-numpy backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--json]

Shapes follow the four stages of a 224px QuadraNet-T at batch 1 plus one
toy training batch. Each case times the three-bank forward (W_a, W_b, W_c)
and its backward, reporting the best of ``--repeat`` runs and the speed-up
of the compiled backend over the fallback.
"""
import argparse
import json
import time

import numpy as np

from quadranet import kernels

CASES = [
    ("stage1 224px", (1, 64, 56, 56), 7),
    ("stage2 224px", (1, 128, 28, 28), 7),
    ("stage3 224px", (1, 256, 14, 14), 7),
    ("stage4 224px", (1, 512, 7, 7), 7),
    ("toy batch", (64, 8, 8, 8), 7),
]


def best_time(fn, repeat):
    fn()  # warm up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(repeat=5):
    rng = np.random.default_rng(0)
    rows = []
    for name, shape, k in CASES:
        x = rng.normal(size=shape)
        w = rng.normal(size=(3, shape[1], k, k))
        g = rng.normal(size=(3,) + shape)
        row = {"case": name, "shape": list(shape), "k": k}
        outs = {}
        for backend in kernels.available_backends():
            fwd = lambda: kernels.dw_forward_multi(x, w, k // 2, backend)
            bwd = lambda: kernels.dw_backward_multi(x, w, g, k // 2, backend)
            row[f"{backend}_fwd_ms"] = 1e3 * best_time(fwd, repeat)
            row[f"{backend}_bwd_ms"] = 1e3 * best_time(bwd, repeat)
            outs[backend] = fwd()
        if "cython" in outs:
            row["max_abs_diff"] = float(np.max(np.abs(outs["cython"] - outs["python"])))
            row["fwd_speedup"] = row["python_fwd_ms"] / row["cython_fwd_ms"]
            row["bwd_speedup"] = row["python_bwd_ms"] / row["cython_bwd_ms"]
        rows.append(row)
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", action="store_true", help="print rows as JSON")
    args = parser.parse_args()
    rows = run(args.repeat)
    if args.json:
        print(json.dumps({"default_backend": kernels.BACKEND, "rows": rows}, indent=2))
        return
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(kernels.available_backends())}")
    head = f"{'case':<14}{'shape':>18}{'py fwd':>10}{'py bwd':>10}{'cy fwd':>10}{'cy bwd':>10}{'fwd x':>8}{'bwd x':>8}"
    print(head)
    for r in rows:
        cy = (f"{r['cython_fwd_ms']:>10.2f}{r['cython_bwd_ms']:>10.2f}{r['fwd_speedup']:>8.1f}{r['bwd_speedup']:>8.1f}"
              if "cython_fwd_ms" in r else f"{'-':>10}{'-':>10}{'-':>8}{'-':>8}")
        print(f"{r['case']:<14}{str(tuple(r['shape'])):>18}{r['python_fwd_ms']:>10.2f}{r['python_bwd_ms']:>10.2f}{cy}")
    print("times in ms, best of", args.repeat)


if __name__ == "__main__":
    main()
