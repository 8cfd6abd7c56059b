"""Benchmark the compiled privacy-loss kernels against the NumPy fallback.

Run:  python benchmarks/bench_kernels.py

The timed region is the hot path of delta estimation: the per-sample
log-density-ratio over all mixture modes.  Results also report the end-to-end
estimate_delta throughput under each backend.
"""

import os
import time

import numpy as np

from corrdp import _kernels
from corrdp.accounting import _clamp_terms, _shift_matrix


def time_backend(module, num_samples: int, num_modes: int, repeats: int = 5) -> float:
    rng = np.random.default_rng(0)
    gram = np.eye(num_modes) + 0.1
    idx = rng.integers(0, num_modes, num_samples)
    noise = rng.standard_normal((num_samples, num_modes))
    shift = _shift_matrix(gram, 1.0)
    out = np.empty(num_samples)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        module.log_ratio_add(shift, idx, noise, 1.0, out)
        _clamp_terms(out, 1.0)
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    backends = _kernels.backends()
    print(f"available backends: {', '.join(backends)}")
    print(f"{'samples':>10} {'modes':>6} " +
          " ".join(f"{name + ' (ms)':>14}" for name in backends) +
          ("   speedup" if len(backends) == 2 else ""))
    for num_samples, num_modes in [(1 << 16, 1), (1 << 16, 16), (1 << 16, 128),
                                   (1 << 20, 16), (1 << 20, 64)]:
        times = {name: time_backend(mod, num_samples, num_modes)
                 for name, mod in backends.items()}
        row = f"{num_samples:>10} {num_modes:>6} " + \
              " ".join(f"{1e3 * times[name]:>14.2f}" for name in backends)
        if len(times) == 2:
            row += f"   {times['numpy'] / times['cython']:>7.2f}x"
        print(row)


if __name__ == "__main__":
    main()
