"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from facepipe import kernels, nn
from facepipe.detect import integral_image, load_cascade, scan_windows
from facepipe.imageio import to_gray
from facepipe.synth import pasted_face_frame


def cases(rng):
    x = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    pooled, arg = kernels.maxpool_forward(x, 2, 2)
    # a training batch at the first LRN of the tiny preset
    xl = rng.standard_normal((32, 16, 64, 64)).astype(np.float32)
    lrn_out, denom = nn.lrn(xl, return_denominator=True)
    cascade = load_cascade()
    ii = integral_image(to_gray(pasted_face_frame(120, 160, (40, 30, 64, 64), seed=0)))
    p = nn.LrnParams()
    return {
        "maxpool_forward": lambda: kernels.maxpool_forward(x, 2, 2),
        "maxpool_backward": lambda: kernels.maxpool_backward(np.ones_like(pooled), arg, x.shape, 2, 2),
        "lrn_forward": lambda: kernels.lrn_forward(xl, p.k, p.n, p.alpha, p.beta),
        "lrn_backward": lambda: kernels.lrn_backward(xl, denom, lrn_out, p.k, p.n, p.alpha, p.beta),
        "cascade_scan_120x160": lambda: scan_windows(cascade, ii),
    }


def run(repeat):
    results = {}
    for backend in kernels.available_backends():
        kernels._impl = kernels.get_backend(backend)
        for name, fn in cases(np.random.default_rng(0)).items():
            fn()
            best = min(timeit.repeat(fn, number=1, repeat=repeat))
            results.setdefault(name, {})[backend] = best * 1e3
    for row in results.values():
        if "compiled" in row:
            row["speedup"] = row["python"] / row["compiled"]
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timed repetitions; the best is kept")
    ap.add_argument("--json", help="write results here instead of printing a table")
    args = ap.parse_args(argv)
    default = kernels._impl
    try:
        results = run(args.repeat)
    finally:
        kernels._impl = default
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"unit": "ms", "results": results}, fh, indent=2, sort_keys=True)
        return 0
    if "compiled" not in kernels.available_backends():
        print("compiled kernels not built; timing the python backend only", file=sys.stderr)
    print(f"{'kernel':<22}{'python ms':>11}{'compiled ms':>13}{'speedup':>9}")
    for name, row in results.items():
        comp = f"{row['compiled']:13.3f}{row['speedup']:8.1f}x" if "compiled" in row else ""
        print(f"{name:<22}{row['python']:11.3f}{comp}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
