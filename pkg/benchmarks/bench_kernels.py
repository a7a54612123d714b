"""Compare the compiled and pure-Python evaluation kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each kernel is timed on a representative workload with both backends; the
outputs are checked for agreement before timing.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from predenhance import _pykernels as py

try:
    from predenhance import _ckernels as cy
except ImportError:
    cy = None


def workloads(rng):
    img = rng.random((128, 128, 3))
    gray = rng.random((128, 128))
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    xy = rng.random((200, 2)) * 100
    wh = rng.random((200, 2)) * 20 + 1
    a = np.hstack([xy, xy + wh])
    b = a[rng.permutation(200)] + rng.normal(0, 2, (200, 4))
    b[:, 2:] = np.maximum(b[:, 2:], b[:, :2] + 0.5)
    ious = py.iou_matrix(a, b)
    conf = np.sort(rng.random(5000))[::-1].copy()
    tp = (rng.random(5000) < 0.6).astype(np.uint8)
    return {
        "bicubic_resize 128->32": lambda k: k.bicubic_resize(img, 32, 32),
        "gaussian_filter_valid 128x128": lambda k: k.gaussian_filter_valid(gray, g),
        "iou_matrix 200x200": lambda k: k.iou_matrix(a, b),
        "greedy_match 200x200": lambda k: k.greedy_match(ious, 0.5),
        "average_precision 5000": lambda k: k.average_precision_sorted(conf, tp, 3000, 11),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; only the Python backend is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in workloads(rng).items():
        ref = np.asarray(fn(py))
        t_py = min(timeit.repeat(lambda: fn(py), number=3, repeat=args.repeat)) / 3
        t_cy = float("nan")
        if cy is not None:
            np.testing.assert_allclose(np.asarray(fn(cy)), ref, rtol=1e-10, atol=1e-12)
            t_cy = min(timeit.repeat(lambda: fn(cy), number=3, repeat=args.repeat)) / 3
        rows.append({"kernel": name, "python_ms": 1e3 * t_py, "cython_ms": 1e3 * t_cy,
                     "speedup": t_py / t_cy})
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:32s} {r['python_ms']:10.3f} {r['cython_ms']:10.3f} {r['speedup']:8.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
