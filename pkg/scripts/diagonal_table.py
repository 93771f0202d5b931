"""Diagonal benchmark A = diag(1..n), Newton degree 63: mapped eigenvalues and PCG iterations per xi."""
import argparse
import csv

import numpy as np

from polypcg.eigest import SpectralBounds
from polypcg.polyprec import build_newton, preconditioned_spectrum_report
from polypcg.solver import PrecondSpec, diagonal_test, solve_spd


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--nlev", type=int, default=6)
    ap.add_argument("--xis", default="0,1e-6,1e-5,1e-4,1e-3,1e-2")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="diagonal_table.csv")
    args = ap.parse_args()

    op, bounds = diagonal_test(args.n)
    lam = np.arange(1, args.n + 1, dtype=np.float64)
    b = np.random.default_rng(args.seed).standard_normal(args.n)
    header = ["xi", "iters", "lambda1", "lambda2", "lambda5", "lambda10", "kappa", "kappa10"]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for xi in (float(t) for t in args.xis.split(",")):
            rep = preconditioned_spectrum_report(build_newton(SpectralBounds(1.0, args.n, xi), args.nlev), lam)
            it = solve_spd(op, b, PrecondSpec(degree=2**args.nlev - 1, xi=xi), bounds=bounds).report.iters
            row = [xi, it, rep.smallest(1), rep.smallest(2), rep.smallest(5), rep.smallest(10),
                   rep.kappa, rep.kappa10]
            w.writerow(row)
            print(f"xi={xi:<7g} iters={it:3d} l1={row[2]:.5f} l2={row[3]:.5f} l5={row[4]:.5f} "
                  f"l10={row[5]:.5f} kappa={row[6]:.2f} kappa10={row[7]:.2f}")


if __name__ == "__main__":
    main()
