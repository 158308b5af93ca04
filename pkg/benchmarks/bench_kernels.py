"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from tabbench import _purepy

try:
    from tabbench import _speedups
except ImportError:  # built without the extension
    _speedups = None


def cases(rng):
    scores = rng.normal(size=20_000).round(2)
    positive = rng.random(20_000) < 0.5
    target = np.zeros((1_000, 64))
    idx = rng.integers(0, 1_000, 20_000)
    src = rng.normal(size=(20_000, 64))
    x = rng.uniform(-3, 3, 24)
    mus, sigmas = rng.uniform(-3, 3, 100), rng.uniform(0.1, 1, 100)
    weights = np.full(100, 0.01)
    q, k, v = (rng.normal(size=(128, 11, 64)) for _ in range(3))
    keep = (rng.random((128, 8, 11, 11)) >= 0.2) / 0.8
    a, _ = _purepy.attention_forward(q, k, v, 8, keep)
    return {
        "midranks (n=20000)": lambda m: m.midranks(scores),
        "auc_binary (n=20000)": lambda m: m.auc_binary(scores, positive),
        "scatter_add_rows (20000x64)": lambda m: m.scatter_add_rows(target, idx, src),
        "parzen_logpdf (24 x 100)": lambda m: m.parzen_logpdf(x, mus, sigmas, weights, -3.0, 3.0),
        "attention_forward (128x11x64, 8 heads)": lambda m: m.attention_forward(q, k, v, 8, keep),
        "attention_backward (128x11x64, 8 heads)": lambda m: m.attention_backward(q, q, k, v, a, 8, keep),
    }


def best_time(fn, impl, repeat):
    runs = timeit.repeat(lambda: fn(impl), number=1, repeat=repeat)
    return min(runs)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _speedups is None:
        print("compiled extension not available; only the numpy fallback can be timed")
    print(f"{'kernel':<42}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, fn in cases(np.random.default_rng(0)).items():
        slow = best_time(fn, _purepy, args.repeat) * 1e3
        if _speedups is None:
            print(f"{name:<42}{slow:>10.3f}{'-':>11}{'-':>9}")
            continue
        fast = best_time(fn, _speedups, args.repeat) * 1e3
        print(f"{name:<42}{slow:>10.3f}{fast:>11.3f}{slow / fast:>8.1f}x")


if __name__ == "__main__":
    main()
