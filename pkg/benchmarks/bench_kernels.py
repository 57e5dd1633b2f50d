"""Time the numba and numpy kernel backends on MiniInception-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time per call for each kernel and backend, plus the
speedup of numba over numpy. The first numba call (JIT compile) is excluded.
"""

import argparse
import statistics
import time

import numpy as np

from statecraft import _kernels
from statecraft import tensor as T


def _median_time(fn, repeat):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(batch=32, size=32, channels=32):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, size + 2, size + 2, channels)).astype(np.float32)
    cols = _kernels.im2col(x, 3, 3, 1, 1, size, size)
    kernel = T.Tensor(rng.standard_normal((3, 3, channels, channels)).astype(np.float32))
    img = rng.random((64, 64, 3)).astype(np.float32)
    warp = np.array([[0.9, 0.1, 2.0], [-0.1, 1.1, -3.0]])
    return {
        "im2col 3x3": lambda: _kernels.im2col(x, 3, 3, 1, 1, size, size),
        "col2im 3x3": lambda: _kernels.col2im(cols, x.shape, 3, 3, 1, 1, size, size),
        "maxpool 3x3/2": lambda: _kernels.maxpool(x, 3, 3, 2, 2, size // 2, size // 2),
        "conv2d fwd+bwd": lambda: _conv_step(x, kernel),
        "warp_affine 64px": lambda: _kernels.warp_affine(img, warp),
    }


def _conv_step(x, kernel):
    T.conv2d(T.Tensor(x, requires_grad=True), kernel, padding="same").sum().backward()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    results = {}
    for backend in ("numpy", "numba"):
        previous = _kernels.use_backend(backend)
        try:
            for name, fn in cases().items():
                results.setdefault(name, {})[backend] = _median_time(fn, args.repeat)
        finally:
            _kernels.use_backend(previous)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, t in results.items():
        print(f"{name:<18} {t['numpy'] * 1e3:>10.2f} {t['numba'] * 1e3:>10.2f} {t['numpy'] / t['numba']:>7.1f}x")


if __name__ == "__main__":
    main()
