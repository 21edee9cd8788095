"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 100000 1000000] [--repeat 5] [--threads 1 4]

Prints one CSV row per (operation, backend, size, threads) with the best
wall time over the repeats and the speed-up relative to the fallback.
Both backends draw from the same counter stream, so each row also reports
whether their outputs agree.
"""
import argparse
import time

import numpy as np

from latent_markov import _kernels_py, markov_core
from latent_markov.markov_core import cumulative_rows
from latent_markov.model_zoo import baseline_scenario

try:
    from latent_markov import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def panel(backend, n, threads):
    model, _, _ = baseline_scenario("sim-baseline")
    p0 = np.array([0.999, 5e-4, 3e-4, 1e-4, 1e-4])
    saved = markov_core.kernels
    markov_core.kernels = backend
    try:
        return markov_core.simulate_panel(model, p0, n, 10, seed=1, num_threads=threads).histories
    finally:
        markov_core.kernels = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100_000, 1_000_000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 4])
    args = ap.parse_args(argv)

    backends = {"python": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    else:
        print("# compiled extension not built; timing the fallback only")

    cum = cumulative_rows(np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.05, 0.05, 0.9]]))
    print("operation,backend,size,threads,seconds,speedup,identical")
    for n in args.sizes:
        states = np.random.default_rng(0).integers(0, 3, n).astype(np.int64)
        ops = {
            "uniforms": lambda b, t: b.uniforms(7, 3, n),
            "categorical_step": lambda b, t: (
                b.categorical_step(states, cum, 7, 3, t) if b is _kernels_c else b.categorical_step(states, cum, 7, 3)
            ),
            "simulate_panel_10d": lambda b, t: panel(b, n, t),
        }
        for op, fn in ops.items():
            ref_time, ref = best_of(lambda: fn(_kernels_py, 1), args.repeat)
            print(f"{op},python,{n},1,{ref_time:.5f},1.00,True")
            if "cython" not in backends:
                continue
            for t in args.threads:
                if op == "uniforms" and t != 1:
                    continue
                sec, out = best_of(lambda: fn(_kernels_c, t), args.repeat)
                same = bool(np.array_equal(out, ref))
                print(f"{op},cython,{n},{t},{sec:.5f},{ref_time / sec:.2f},{same}")


if __name__ == "__main__":
    main()
