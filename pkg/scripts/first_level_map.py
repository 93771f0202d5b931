"""Eigenvalues 0.1, 0.14, ..., 1.9 mapped by the first Newton level, with and without the xi shift."""
import csv

import numpy as np

from polypcg.eigest import SpectralBounds
from polypcg.polyprec import build_newton, eval_scalar, unclustering_threshold

lam = np.round(np.arange(0.1, 1.9001, 0.04), 2)
with open("first_level_map.csv", "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["xi", "lambda_original", "lambda_mapped"])
    for xi in (0.0, 0.05):
        c = build_newton(SpectralBounds(0.1, 1.9, xi), 1)
        mapped = eval_scalar(c, lam)
        for a, m in zip(lam, mapped):
            w.writerow([xi, a, m])
        order = np.argsort(mapped)[:3]
        print(f"xi={xi}: threshold {unclustering_threshold(c) * c.theta_bar:.4f}, "
              f"three smallest mapped come from {lam[order].tolist()}")
