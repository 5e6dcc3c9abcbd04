"""Time recalibration with the compiled and the numpy kernel backends.

    python3 benchmarks/bench_kernels.py --fan-in 256 --rows 64 --density 0.3
"""

import argparse
import time

import numpy as np

from saferealign import kernels
from saferealign.refmodel import CalibRecord
from saferealign.surgery import SurgeryPlan, build_hessian, recalibrate_layer


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--fan-in", type=int, nargs="+", default=[64, 256, 512])
    ap.add_argument("--rows", type=int, default=64)
    ap.add_argument("--density", type=float, default=0.3, help="fraction of masked entries")
    ap.add_argument("--block-size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    names = sorted(kernels.BACKENDS)
    print(f"backends: {', '.join(names)} (active: {kernels.BACKEND})")
    print(f"{'fan_in':>7} " + " ".join(f"{n + ' s':>12}" for n in names) + f" {'speedup':>8} {'max diff':>10}")
    for d in args.fan_in:
        x = rng.standard_normal((2 * d, d))
        hess = build_hessian(CalibRecord("bench", x))
        hess.inverse  # factor once, outside the timed region
        delta = rng.standard_normal((args.rows, d))
        mask = rng.random((args.rows, d)) < args.density
        plan = SurgeryPlan(block_size=args.block_size)
        results, times = {}, {}
        for name in names:
            results[name] = recalibrate_layer(delta, mask, hess, plan, name)
            times[name] = best_of(lambda: recalibrate_layer(delta, mask, hess, plan, name), args.repeat)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        diff = max(float(np.max(np.abs(results[n] - results["python"]))) for n in names)
        print(f"{d:>7} " + " ".join(f"{times[n]:>12.4f}" for n in names) + f" {speed:>8.2f} {diff:>10.2e}")


if __name__ == "__main__":
    main()
