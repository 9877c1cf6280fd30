"""Compare the compiled and pure-Python kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Prints one row per (kernel, size, backend) with the best wall time over
``--repeat`` runs and the speed-up of the compiled backend.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from divem.kernels import available_backends


def _cases(rng):
    for n in (10, 1_000, 100_000):
        x = rng.uniform(0.01, 50.0, n)
        yield "digamma", n, lambda mod, x=x: mod.digamma(x)
        yield "trigamma", n, lambda mod, x=x: mod.trigamma(x)
    for s, T in ((3, 50), (3, 1000), (10, 1000)):
        log_b = rng.standard_normal((T, s))
        pi = rng.dirichlet(np.ones(s))
        Q = rng.dirichlet(np.ones(s + 1), size=s)
        tau = Q[:, -1].copy()
        Q = Q[:, :-1]
        args = (log_b, pi, Q, tau)
        yield "forward_backward", f"s={s},T={T}", lambda mod, a=args: mod.hmm_forward_backward(*a, True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write results here")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the Python backend will be timed", file=sys.stderr)
    rows = []
    for name, size, fn in _cases(np.random.default_rng(0)):
        times = {}
        for label, mod in backends.items():
            number = 1
            while timeit.timeit(lambda: fn(mod), number=number) < 0.05 and number < 10**6:
                number *= 10
            best = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
            times[label] = best
            rows.append((name, size, label, best))
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:17s} {str(size):12s} " + "  ".join(f"{k}={v * 1e6:10.1f}us" for k, v in times.items()) + f"  speed-up x{speed:.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "size", "backend", "seconds"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
