"""Time the compiled kernels against the numpy fallback on representative inputs.

Run ``python3 -m facadeseg.bench`` (or ``benchmarks/bench_kernels.py``). Each
kernel is timed on both back ends with identical inputs, and the outputs are
compared bit for bit before any timing is reported.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from .kernels import _fallback, backends


def _cases(rng):
    x = rng.standard_normal((4, 32, 66, 66)).astype(np.float32)
    cols = rng.standard_normal((4, 32, 3, 3, 64, 64)).astype(np.float32)
    act = rng.standard_normal((4, 32, 128, 128)).astype(np.float32)
    vals, idx = _fallback.maxpool2x2(act)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    blobs = rng.random((512, 512)) < 0.45
    ang = np.sort(rng.uniform(0, 2 * np.pi, 200))
    rad = rng.uniform(100, 250, 200)
    xs, ys = 256 + rad * np.cos(ang), 256 + rad * np.sin(ang)
    return {
        "im2col 3x3 (4x32x64x64)": lambda k: k.im2col(x, 3, 3, 64, 64),
        "col2im 3x3 (4x32x64x64)": lambda k: k.col2im(cols, 66, 66),
        "maxpool2x2 (4x32x128x128)": lambda k: k.maxpool2x2(act),
        "unpool2x2 (4x32x128x128)": lambda k: k.unpool2x2(vals, idx, 128, 128),
        "components 8-conn (512x512)": lambda k: k.label_components(blobs),
        "polygon fill 200 vertices (512x512)": lambda k: k.fill_polygon(xs, ys, 512, 512),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(p, q) for p, q in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


def run(repeat=5, seed=0):
    """Best-of-``repeat`` seconds per kernel and back end, plus the speed-up."""
    found = backends()
    rows = []
    for name, fn in _cases(np.random.default_rng(seed)).items():
        outs = {b: fn(mod) for b, mod in found.items()}
        ref = outs["python"]
        row = {"kernel": name, "identical": all(_same(ref, o) for o in outs.values())}
        for b, mod in found.items():
            row[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat))
        if "cython" in found:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)
    return rows


def format_table(rows):
    cols = ["python", "cython"] if "cython" in rows[0] else ["python"]
    head = f"{'kernel':<38}" + "".join(f"{c + ' ms':>12}" for c in cols) + f"{'speed-up':>10}{'identical':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        times = "".join(f"{1e3 * r[c]:>12.2f}" for c in cols)
        speed = f"{r['speedup']:>9.1f}x" if "speedup" in r else f"{'-':>10}"
        lines.append(f"{r['kernel']:<38}{times}{speed}{str(r['identical']):>11}")
    return "\n".join(lines)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="facadeseg-bench", description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print rows as JSON instead of a table")
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    print(json.dumps(rows, indent=2) if args.json else format_table(rows))
    if "cython" not in rows[0]:
        print("compiled kernels not built; only the fallback was timed", file=sys.stderr)
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
