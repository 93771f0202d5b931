"""Preconditioned conjugate gradient with operation counting."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .sparse import CounterSet, dot

__all__ = ["SolveConfig", "SolveReport", "IdentityPreconditioner", "BreakdownError", "pcg_solve",
           "write_history_csv"]


class BreakdownError(ArithmeticError):
    """p'Ap <= 0: the operator (or preconditioner) is not positive definite."""


@dataclass(frozen=True)
class SolveConfig:
    tol: float = 1e-10
    max_iters: int = 10_000
    record_history: bool = True

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SolveReport:
    iters: int
    mvp: int
    ddot: int
    final_relres: float
    converged: bool
    history: list = field(default_factory=list)
    proj_ddot: int = 0
    setup_seconds: float = 0.0
    solve_seconds: float = 0.0
    degree: int = 0

    def to_dict(self, with_history: bool = False) -> dict:
        d = asdict(self)
        if not with_history:
            d.pop("history")
        return d


class IdentityPreconditioner:
    symmetric = True
    degree = 0

    def __init__(self, dim: int):
        self.dim = dim

    def apply(self, r):
        return np.array(r, dtype=np.float64, copy=True)


def pcg_solve(a, b, precond=None, cfg: SolveConfig | None = None, x0=None,
              setup_seconds: float = 0.0):
    """Solve A x = b by PCG; returns ``(x, report)``.

    Stops when ||b - A x_k|| / ||b|| <= tol, measured on the recurrence
    residual.  Per iteration: one product with A, one preconditioner
    application and three global inner products.  Counts reported are those
    incurred by this call only.
    """
    cfg = cfg or SolveConfig()
    b = np.asarray(b, dtype=np.float64)
    n = a.dim
    if b.shape != (n,):
        raise ValueError(f"dimension mismatch: b has shape {b.shape}, operator dim {n}")
    if precond is None:
        precond = IdentityPreconditioner(n)
    degree = getattr(precond, "degree", 0)
    counter: CounterSet = a.counter
    start = counter.snapshot()
    t0 = time.perf_counter()

    def finish(x, it, relres, ok, hist):
        now = counter.snapshot()
        rep = SolveReport(it, now["mvp"] - start["mvp"], now["ddot"] - start["ddot"], relres, ok,
                          hist, now["proj_ddot"] - start["proj_ddot"], setup_seconds,
                          time.perf_counter() - t0, degree)
        return x, rep

    bnorm = math.sqrt(dot(b, b, counter))
    if bnorm == 0.0:
        return finish(np.zeros(n), 0, 0.0, True, [0.0] if cfg.record_history else [])
    if x0 is None:
        x = np.zeros(n)
        r = b.copy()
    else:
        x = np.array(x0, dtype=np.float64, copy=True)
        r = b - a.apply(x)
    relres = math.sqrt(dot(r, r, counter)) / bnorm if x0 is not None else 1.0
    hist = [relres] if cfg.record_history else []
    if relres <= cfg.tol:
        return finish(x, 0, relres, True, hist)
    z = precond.apply(r)
    rz = dot(r, z, counter)
    p = z.copy()
    best_x, best_res = x.copy(), relres
    for it in range(1, cfg.max_iters + 1):
        q = a.apply(p)
        pq = dot(p, q, counter)
        if not pq > 0:
            raise BreakdownError(f"p'Ap = {pq:.3e} at iteration {it}; operator is not SPD")
        step = rz / pq
        x += step * p
        r -= step * q
        counter.axpy += 2
        relres = math.sqrt(dot(r, r, counter)) / bnorm
        if cfg.record_history:
            hist.append(relres)
        if relres < best_res:
            best_res = relres
            best_x = x.copy()
        if relres <= cfg.tol:
            return finish(x, it, relres, True, hist)
        z = precond.apply(r)
        rz_new = dot(r, z, counter)
        if not rz_new > 0:
            raise BreakdownError(f"r'Pr = {rz_new:.3e} at iteration {it}; preconditioner is not SPD")
        p = z + (rz_new / rz) * p
        counter.axpy += 1
        rz = rz_new
    return finish(best_x, cfg.max_iters, best_res, False, hist)


def write_history_csv(report: SolveReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "relres"])
        for i, v in enumerate(report.history):
            w.writerow([i, repr(float(v))])
