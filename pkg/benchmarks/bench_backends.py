"""Compare the compiled kernels against the pure numpy fallbacks.

Run:  python benchmarks/bench_backends.py
"""

import time

import numpy as np

from dpkfac import _kernels
from dpkfac._kernels import pure


def timeit(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_jacobi(impl, n, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    a = m @ m.T

    def run():
        work = np.ascontiguousarray(a.copy())
        v = np.eye(n)
        impl.jacobi_sweeps(work, v, 1e-12 * np.linalg.norm(a), 100)

    return timeit(run, repeat=2 if n >= 256 else 3)


def bench_im2col(impl, shape, k=3, stride=2, pad=1, seed=0):
    rng = np.random.default_rng(seed)
    x = np.ascontiguousarray(rng.standard_normal(shape))
    return timeit(lambda: impl.im2col(x, k, stride, pad), repeat=5)


def main():
    active = _kernels.get_backend(None)
    if active is pure:
        print("compiled kernels unavailable; benchmarking the pure backend only")
        impls = [("pure", pure)]
    else:
        impls = [("compiled", active), ("pure", pure)]

    print(f"{'kernel':28s}" + "".join(f"{name:>12s}" for name, _ in impls))
    for n in (64, 128, 256):
        times = [bench_jacobi(impl, n) for _, impl in impls]
        print(f"{'jacobi eig n=' + str(n):28s}" + "".join(f"{t * 1e3:11.1f}ms" for t in times))
    for shape in ((64, 1, 28, 28), (256, 16, 14, 14)):
        times = [bench_im2col(impl, shape) for _, impl in impls]
        label = "im2col " + "x".join(map(str, shape))
        print(f"{label:28s}" + "".join(f"{t * 1e3:11.1f}ms" for t in times))


if __name__ == "__main__":
    main()
