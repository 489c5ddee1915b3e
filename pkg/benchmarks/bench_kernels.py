"""Time the compiled and fallback kernels on the same inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from sentinel import kernels


def cases(rng):
    x = rng.random((120, 160, 3))
    w, b = rng.normal(size=(3, 3, 3, 8)), rng.normal(size=8)
    small = rng.random((28, 28, 1))
    sw, sb = rng.normal(size=(5, 5, 1, 4)), rng.normal(size=4)
    fmap = rng.random((118, 158, 8))
    vec, mat, bias = rng.random(4096), rng.normal(size=(256, 4096)), rng.normal(size=256)
    n = 400
    lo = rng.random((n, 2)) * 0.8
    boxes = np.hstack([lo, lo + rng.random((n, 2)) * 0.2])
    cls = rng.integers(0, 3, size=n).astype(np.int64)
    order = np.argsort(-rng.random(n)).astype(np.int64)
    return {
        "conv2d 120x160x3 * 3x3x3x8": lambda k: k.conv2d(x, w, b, 1),
        "conv2d 28x28x1 * 5x5x1x4": lambda k: k.conv2d(small, sw, sb, 1),
        "maxpool2d 118x158x8 / 2x2": lambda k: k.maxpool2d(fmap, 2, 2),
        "dense 4096 -> 256": lambda k: k.dense(vec, mat, bias),
        "greedy_nms 400 boxes": lambda k: k.greedy_nms(boxes, cls, order, 0.5),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    backends = kernels.available()
    rng = np.random.default_rng(0)
    names = [b.NAME for b in backends]
    print(f"{'kernel':<30}" + "".join(f"{n + ' (ms)':>14}" for n in names)
          + ("   speedup" if len(backends) == 2 else ""))
    for label, fn in cases(rng).items():
        times = []
        for backend in backends:
            timer = timeit.Timer(lambda: fn(backend))
            number, _ = timer.autorange()
            best = min(timer.repeat(repeat=args.repeat, number=number)) / number
            times.append(best * 1e3)
        row = f"{label:<30}" + "".join(f"{t:>14.3f}" for t in times)
        if len(times) == 2:
            row += f"   {times[1] / times[0]:>6.2f}x"
        print(row)


if __name__ == "__main__":
    main()
