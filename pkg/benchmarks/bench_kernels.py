"""Compare the compiled and numpy oriented-gradient kernels.

    python3 benchmarks/bench_kernels.py [--images 200] [--pool 4]
"""

import argparse
import time

import numpy as np

from defense_prefix import _orient_py, kernels


def bench(fn, images, pool, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for img in images:
            fn(img, pool)
        best = min(best, time.perf_counter() - t0)
    return best / len(images)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=200)
    ap.add_argument("--pool", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8) for _ in range(args.images)]
    py = bench(_orient_py.orientation_field, images, args.pool, args.repeats)
    print(f"numpy    {1e3 * py:8.3f} ms/image")
    if kernels.BACKEND != "compiled":
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return
    from defense_prefix import _orient

    c = bench(_orient.orientation_field, images, args.pool, args.repeats)
    diff = max(float(np.abs(_orient.orientation_field(im, args.pool)
                            - _orient_py.orientation_field(im, args.pool)).max()) for im in images[:10])
    print(f"compiled {1e3 * c:8.3f} ms/image  ({py / c:.1f}x faster, max |diff| {diff:.2e})")


if __name__ == "__main__":
    main()
