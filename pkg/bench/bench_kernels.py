"""Timing comparison of the compiled and vectorized kernel variants.

Both variants of each hot kernel are timed side by side regardless of which
one the package bound at import, after a warmup call that absorbs numba's
compile time.  The MLP denoiser is deliberately not benched this way: its
hot path is dense matrix products already running on BLAS, which an njit
rewrite can only lose against.

    python bench/bench_kernels.py
    python bench/bench_kernels.py --sizes 1000,100000 --repeats 7
"""

import argparse
import time

import numpy as np

from famelab._accel import HAVE_NUMBA, USE_NUMBA
from famelab._kernels import (
    _nb_gmm_eval,
    _nb_pairwise_sqdist,
    _np_gmm_eval,
    _np_pairwise_sqdist,
)
from famelab.gmm import preset
from famelab.sampler import AnalyticSource, SamplerConfig, sample_batch
from famelab.schedule import Rng, make_schedule


def best_of(fn, args, repeats):
    fn(*args)  # warmup; first numba call compiles
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def fmt(seconds):
    if seconds < 1e-3:
        return f"{seconds * 1e6:8.1f} us"
    if seconds < 1.0:
        return f"{seconds * 1e3:8.2f} ms"
    return f"{seconds:8.3f} s "


def row(label, np_time, nb_time):
    if nb_time is None:
        print(f"{label:<34} numpy {fmt(np_time)}   numba     (unavailable)")
    else:
        print(
            f"{label:<34} numpy {fmt(np_time)}   numba {fmt(nb_time)}"
            f"   speedup {np_time / nb_time:5.2f}x"
        )


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--sizes",
        default="1000,10000,100000",
        help="comma-separated batch sizes for the mixture kernel",
    )
    parser.add_argument(
        "--pairwise", default="512,2048", help="comma-separated set sizes for sqdist"
    )
    parser.add_argument("--repeats", type=int, default=5, help="timed repeats, best-of")
    args = parser.parse_args(argv)

    print(f"numba available: {HAVE_NUMBA}   active binding: {'numba' if USE_NUMBA else 'numpy'}")
    print()

    spec = preset("imbalanced2d")
    pack = spec.pack(None)  # marginal mixture, 16 components
    rng = Rng(62)
    for n in (int(s) for s in args.sizes.split(",")):
        x = rng.standard_normal((n, 2)) * 4.0
        kargs = (x, pack.means, pack.qmats, pack.lams, pack.logw, 1.0)
        np_t = best_of(_np_gmm_eval, kargs, args.repeats)
        nb_t = best_of(_nb_gmm_eval, kargs, args.repeats) if HAVE_NUMBA else None
        row(f"gmm_eval (16 comps, n={n})", np_t, nb_t)

    print()
    for n in (int(s) for s in args.pairwise.split(",")):
        a = rng.standard_normal((n, 2))
        b = rng.standard_normal((n, 2))
        np_t = best_of(_np_pairwise_sqdist, (a, b), args.repeats)
        nb_t = best_of(_nb_pairwise_sqdist, (a, b), args.repeats) if HAVE_NUMBA else None
        row(f"pairwise_sqdist ({n} x {n})", np_t, nb_t)

    print()
    sched = make_schedule("karras-like", 32, 0.02, 10.0)
    cfg = SamplerConfig(schedule=sched, method="heun", record_outputs=False)
    source = AnalyticSource(spec)
    t0 = time.perf_counter()
    sample_batch(source, cfg, 7, spec.class_ids, 250)
    total = time.perf_counter() - t0
    print(
        f"end-to-end analytic sampling (2000 trajectories, T=32, heun, "
        f"{'numba' if USE_NUMBA else 'numpy'} binding): {fmt(total).strip()}"
    )


if __name__ == "__main__":
    main()
