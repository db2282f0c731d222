"""Time the compiled kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from laso import kernels


def _ap_case(rng, n, k):
    scores = rng.normal(size=(n, k)).round(2)  # rounding gives ties
    pos = rng.random((n, k)) < 0.2
    return lambda backend: kernels.average_precision_columns(scores, pos, backend=backend)


def _topk_case(rng, nq, npool, L):
    dist = rng.random((nq, npool))
    ql = (rng.random((nq, L)) < 0.15).astype(np.uint8)
    pl = (rng.random((npool, L)) < 0.15).astype(np.uint8)
    ex = rng.integers(0, npool, (nq, 2))
    return lambda backend: kernels.topk_max_iou(dist, ql, pl, ex, [1, 3, 5], backend=backend)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="Multiply problem sizes.")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    s = args.scale
    cases = {
        f"average_precision {int(1000 * s)}x20": _ap_case(rng, int(1000 * s), 20),
        f"average_precision {int(20000 * s)}x4": _ap_case(rng, int(20000 * s), 4),
        f"topk_max_iou {int(500 * s)}q x {int(1000 * s)}": _topk_case(rng, int(500 * s), int(1000 * s), 20),
    }
    backends = ["python"]
    try:
        kernels.backend_module("cython")
        backends.append("cython")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'case':<36}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases.items():
        times = []
        for b in backends:
            fn(b)  # warm up
            times.append(min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)))
        line = f"{name:<36}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
