"""Compare the compiled raster kernels against the NumPy fallback.

Both backends must paint bit-identical owner maps; this script checks that
on every workload before timing. Run from the repository root:

    python3 benchmarks/bench_raster.py [--size 256] [--repeats 200]
"""
import argparse
import time

import numpy as np

from sparsepose.raster import BACKGROUND, _kernels_py

try:
    from sparsepose.raster import _kernels
except ImportError:
    _kernels = None


def fresh(size):
    return np.full((size, size), BACKGROUND, dtype=np.int32)


def disk_workload(impl, size, rng):
    owner = fresh(size)
    for i, (x, y, r) in enumerate(rng):
        impl.paint_disk(owner, x * size, y * size, r, i)
    return owner


def segment_workload(impl, size, rng):
    owner = fresh(size)
    for i, (ax, ay, bx, by) in enumerate(rng):
        impl.paint_segment(owner, ax * size, ay * size, bx * size, by * size,
                           1.5, i)
    return owner


def bench(label, fn, repeats):
    fn()  # warm up and materialize caches
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    dt = (time.perf_counter() - t0) / repeats
    print(f"  {label:18s} {dt * 1e6:10.1f} us/call")
    return dt


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    if _kernels is None:
        print("compiled kernels not built; nothing to compare")
        return

    rng = np.random.default_rng(0)
    disks = [(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(1, 6))
             for _ in range(32)]
    segments = [tuple(rng.uniform(0, 1, size=4)) for _ in range(32)]

    a = disk_workload(_kernels, args.size, disks)
    b = disk_workload(_kernels_py, args.size, disks)
    assert np.array_equal(a, b), "disk outputs differ between backends"
    a = segment_workload(_kernels, args.size, segments)
    b = segment_workload(_kernels_py, args.size, segments)
    assert np.array_equal(a, b), "segment outputs differ between backends"
    print(f"outputs bit-identical at {args.size}x{args.size}")

    print("disks (32 per call):")
    t_c = bench("cython", lambda: disk_workload(_kernels, args.size, disks),
                args.repeats)
    t_py = bench("numpy", lambda: disk_workload(_kernels_py, args.size, disks),
                 args.repeats)
    print(f"  speedup {t_py / t_c:7.1f}x")

    print("segments (32 per call):")
    t_c = bench("cython",
                lambda: segment_workload(_kernels, args.size, segments),
                args.repeats)
    t_py = bench("numpy",
                 lambda: segment_workload(_kernels_py, args.size, segments),
                 args.repeats)
    print(f"  speedup {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
