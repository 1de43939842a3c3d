#!/usr/bin/env python3
"""Benchmark the compiled mixture kernels against the numpy reference.

Times the two hot entry points (component scores and posterior statistics)
over a range of batch sizes on the canonical fixture, and checks agreement
while at it. Run after an editable install:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from diffuselab import gmm
from diffuselab.kernels import get_backend


def timeit(fn, *args, repeat=5, min_time=0.2):
    best = float("inf")
    for _ in range(repeat):
        n, t0 = 0, time.perf_counter()
        while time.perf_counter() - t0 < min_time:
            fn(*args)
            n += 1
        best = min(best, (time.perf_counter() - t0) / n)
    return best


def main():
    g = gmm.canonical_fixture()
    rng = np.random.default_rng(0)
    backends = {}
    for name in ("numpy", "compiled"):
        try:
            backends[name] = get_backend(name)
        except ImportError:
            print(f"backend {name!r} unavailable, skipping")
    if len(backends) < 2:
        return

    print(f"{'function':<28}{'batch':>8}{'numpy':>12}{'compiled':>12}{'speedup':>10}")
    for fn_name in ("component_logpdf_scores", "posterior_component_stats"):
        for B in (1, 16, 256, 4096, 65536):
            x = rng.normal(scale=3, size=(B, g.dim))
            mc = np.ones(B)
            s2 = rng.uniform(0.01, 9.0, B)
            args = (x, mc, s2, g.means, g._evecs, g._evals, g._logw)
            outs = {n: getattr(b, fn_name)(*args) for n, b in backends.items()}
            for a, c in zip(outs["numpy"], outs["compiled"]):
                diff = np.max(np.abs(a - c))
                assert diff < 1e-10, f"backend disagreement {diff:.2e} in {fn_name}"
            t_np = timeit(getattr(backends["numpy"], fn_name), *args)
            t_cy = timeit(getattr(backends["compiled"], fn_name), *args)
            print(f"{fn_name:<28}{B:>8}{t_np * 1e6:>10.1f}us{t_cy * 1e6:>10.1f}us{t_np / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
