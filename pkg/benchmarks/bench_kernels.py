"""Compare the numba and numpy implementations of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1]

Each kernel runs once untimed (JIT warm-up), then ``repeat`` times per
backend; the best wall time is reported with the max abs difference
between the two outputs.  Set ``S2SDROUGHT_NUMBA=0`` to see which path the
package itself dispatches to; this script always times both.
"""
import argparse
import time

import numpy as np

from s2sdrought import _accel, kernels
from s2sdrought.indices import FDIIConfig


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def case_col2im(rng, scale):
    b, c, ho, wo, k, s = 4, 16, 24 * scale, 48 * scale, 4, 2
    hp, wp = (ho - 1) * s + k, (wo - 1) * s + k
    cols = rng.normal(size=(b, ho, wo, c, k, k))

    def run(impl):
        def go():
            g = np.zeros((b, c, hp, wp))
            impl(g, cols, 0, s)
            return g

        return go

    return "col2im_accumulate", run(kernels.col2im_accumulate_numpy), run(kernels.col2im_accumulate_numba)


def case_percentile(rng, scale):
    m, n = 4096 * scale, 31 * 20
    pools = rng.normal(size=(m, n))
    pools[:, ::7] = np.round(pools[:, ::7], 1)  # some ties
    values = np.round(rng.normal(size=m), 1)
    return (
        "percentile_rank",
        lambda: kernels.percentile_rank_numpy(values, pools),
        lambda: kernels.percentile_rank_numba(values, pools),
    )


def case_fdii(rng, scale):
    p, m = 73, 2048 * scale
    walk = 50 + np.cumsum(rng.normal(0, 8, size=(p, m)), axis=0)
    pct = np.clip(walk, 1, 99)
    cfg = FDIIConfig()
    args = (pct, cfg.max_window, cfg.drop_min, cfg.end_max, cfg.rate_baseline, cfg.severity_cap)
    return (
        "fdii_scan",
        lambda: np.stack(kernels.fdii_scan_numpy(*args)[:2]),
        lambda: np.stack(kernels.fdii_scan_numba(*args)[:2]),
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=int, default=1, help="problem size multiplier")
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"dispatch backend: {_accel.backend()}")
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}{'max |diff|':>12}")
    for make in (case_col2im, case_percentile, case_fdii):
        name, np_fn, nb_fn = make(rng, args.scale)
        t_np, out_np = best_of(np_fn, args.repeat)
        t_nb, out_nb = best_of(nb_fn, args.repeat)
        diff = float(np.nanmax(np.abs(out_np - out_nb)))
        print(f"{name:<20}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
