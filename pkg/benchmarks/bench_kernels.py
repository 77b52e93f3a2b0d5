"""Benchmark the compiled kernels against the pure-NumPy fallback.

Runs each hot kernel (separable correlation, polar->cartesian scan
conversion, cartesian->polar resampling) on realistic image sizes with
both backends and prints a timing table plus a numeric agreement check.

Usage:
    python benchmarks/bench_kernels.py [--repeats 5] [--size 256]
"""
import argparse
import importlib
import time

import numpy as np


def load_backends():
    from ivusim import _kernels_py

    backends = {"python": _kernels_py}
    try:
        _kernels = importlib.import_module("ivusim._kernels")
        backends["cython"] = _kernels
    except ImportError:
        print("note: compiled extension not built, benchmarking python only")
    return backends


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--size", type=int, default=256,
                        help="polar grid side (cartesian side is 1.5x)")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n = args.size
    cart_side = int(1.5 * n)
    polar = rng.random((n, n))
    cart = rng.random((cart_side, cart_side))
    axial = rng.random(13)
    lateral = rng.random(19)

    cases = {
        "correlate_separable": lambda m: m.correlate_separable(polar, axial, lateral),
        "scan_polar_to_cart": lambda m: m.scan_polar_to_cart(polar, cart_side),
        "scan_cart_to_polar": lambda m: m.scan_cart_to_polar(cart, n, n),
    }

    backends = load_backends()
    results = {}
    outputs = {}
    for case, call in cases.items():
        for name, mod in backends.items():
            results[(case, name)] = best_of(lambda: call(mod), args.repeats)
            outputs[(case, name)] = call(mod)

    width = max(len(c) for c in cases) + 2
    header = f"{'kernel':<{width}}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for case in cases:
        row = f"{case:<{width}}"
        for name in backends:
            row += f"{results[(case, name)] * 1e3:>10.2f}ms"
        if len(backends) == 2:
            ratio = results[(case, "python")] / results[(case, "cython")]
            row += f"{ratio:>9.1f}x"
        print(row)

    if len(backends) == 2:
        print()
        for case in cases:
            diff = np.max(np.abs(outputs[(case, "python")] - outputs[(case, "cython")]))
            print(f"max |python - cython| for {case}: {diff:.3e}")


if __name__ == "__main__":
    main()
