"""Compare the compiled and numpy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py``. Prints the median wall
time of each kernel per backend and checks that both agree.
"""
import argparse
import time

import numpy as np

from sbevloc import kernels


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    x = rng.random((48, 32, 32, 8)) * (rng.random((48, 32, 32, 1)) > 0.6)
    w = rng.standard_normal((3, 3, 8, 8))
    b = rng.standard_normal(8)
    g = rng.standard_normal((48, 32, 32, 8))
    # After REM max-pooling over 4 rotations only the winning copy gets gradient.
    g_rem = g * (rng.random(g.shape) < 0.25)
    img = (rng.random((200, 200)) > 0.9) * rng.random((200, 200))
    rows = rng.integers(0, 200, 2000)
    cols = rng.integers(0, 200, 2000)
    return {
        "conv2d_forward": lambda: kernels.conv2d_forward(x, w, b),
        "conv2d_backward": lambda: kernels.conv2d_backward(g, x, w, True),
        "conv2d_backward_rem": lambda: kernels.conv2d_backward(g_rem, x, w, True),
        "fast_scores": lambda: kernels.fast_scores(img, 0.08, 9),
        "nms_greedy": lambda: kernels.nms_greedy(rows, cols, (200, 200), 3, 500),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    results = {}
    for name in backends:
        kernels.use_backend(name)
        fns = cases(np.random.default_rng(0))
        results[name] = {k: (_median_time(f, args.repeats), f()) for k, f in fns.items()}
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for k in results[backends[0]]:
        row = f"{k:<20}" + "".join(f"{results[b][k][0] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{results['python'][k][0] / results['cython'][k][0]:>11.1f}x"
            a, c = results["python"][k][1], results["cython"][k][1]
            a = a if isinstance(a, tuple) else (a,)
            c = c if isinstance(c, tuple) else (c,)
            assert all(np.allclose(u, v, rtol=1e-12, atol=1e-12) for u, v in zip(a, c)), k
        print(row)


if __name__ == "__main__":
    main()
