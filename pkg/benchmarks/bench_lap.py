"""Timing of the compiled and pure-Python LAP backends, with scipy as a reference.

    python benchmarks/bench_lap.py --sizes 16 64 128 256 --repeats 5
"""

import argparse
import time

import numpy as np
from scipy.optimize import linear_sum_assignment

from labelqa.assignment import SENTINEL, available_backends, solve_lap


def pairing_cost(n, rng):
    # the matrix shape training actually solves: -cosine with a blocked diagonal
    x = rng.normal(size=(n, 32))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    c = -(x @ x.T)
    np.fill_diagonal(c, SENTINEL)
    return c


def best_time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 128, 256])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--python-max", type=int, default=256,
                   help="skip the pure-Python backend above this size")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    backends = available_backends()
    cols = [*backends, "scipy"]
    print(f"{'n':>5}  " + "  ".join(f"{c + ' ms':>12}" for c in cols) + "  speedup")
    for n in args.sizes:
        c = pairing_cost(n, rng)
        ref = c[linear_sum_assignment(c)].sum()
        row = {}
        for b in backends:
            if b == "python" and n > args.python_max:
                row[b] = None
                continue
            t, (_, total) = best_time(lambda: solve_lap(c, backend=b), args.repeats)
            if not np.isclose(total, ref, rtol=0, atol=1e-9):
                raise SystemExit(f"{b} backend disagrees with scipy at n={n}")
            row[b] = t
        row["scipy"] = best_time(lambda: linear_sum_assignment(c), args.repeats)[0]
        speed = ""
        if row.get("compiled") and row.get("python"):
            speed = f"{row['python'] / row['compiled']:.0f}x"
        cells = ["-" if row[k] is None else f"{1e3 * row[k]:.3f}" for k in cols]
        print(f"{n:>5}  " + "  ".join(f"{v:>12}" for v in cells) + f"  {speed:>7}")


if __name__ == "__main__":
    main()
