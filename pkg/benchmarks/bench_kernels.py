#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

Run:  python benchmarks/bench_kernels.py [--size BYTES] [--repeat N]
"""

from __future__ import annotations

import argparse
import importlib
import time


def load_backends():
    backends = {}
    purepy = importlib.import_module("qkdnet.kernels.purepy")
    backends["purepy"] = purepy
    try:
        backends["cython"] = importlib.import_module("qkdnet.kernels._core")
    except ImportError:
        print("compiled backend not built; benchmarking pure Python only")
    return backends


def bench(label, func, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        func()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--size", type=int, default=1 << 20,
                        help="payload size in bytes (default 1 MiB)")
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    backends = load_backends()
    size = args.size
    data = bytes(size)
    other = bytes(range(256)) * (size // 256 + 1)
    other = other[:size]
    key32 = bytes(range(32))

    cases = {
        "fill_keystream": lambda mod: mod.fill_keystream(7, 0, size),
        "xor_bytes": lambda mod: mod.xor_bytes(data, other),
        "poly_mac": lambda mod: mod.poly_mac(key32, data),
        "corrupt_bits": lambda mod: mod.corrupt_bits(data, 1 << 60, 42),
    }

    print(f"payload: {size} bytes, best of {args.repeat}\n")
    header = f"{'kernel':<16}" + "".join(
        f"{name + ' MB/s':>16}" for name in backends
    )
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, case in cases.items():
        times = {}
        outs = {}
        for backend, mod in backends.items():
            times[backend] = bench(name, lambda m=mod: case(m), args.repeat)
            outs[backend] = case(mod)
        if len(outs) == 2:
            a, b = outs.values()
            assert a == b, f"{name}: backend outputs differ"
        row = f"{name:<16}"
        for backend in backends:
            rate = size / times[backend] / 1e6
            row += f"{rate:>16.1f}"
        if len(backends) == 2:
            row += f"{times['purepy'] / times['cython']:>9.1f}x"
        print(row)
    print("\noutputs verified identical across backends")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
