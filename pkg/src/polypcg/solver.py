"""End-to-end pipelines: seed scaling, eigenvalue estimates, polynomial, optional low-rank, PCG."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .dfn import (DfnBlockSystem, factor_blocks, make_schur_operator, permuted_residual, recover_hp,
                  schur_diag, schur_rhs)
from .eigest import DEFAULT_TOL_EIG, SpectralBounds, estimate_extremes, leftmost_eigenpairs
from .linop import LinearOperator, ScaledOperator, make_scaled_operator
from .lowrank import CorrectedPreconditioner, build_correction
from .pcg import IdentityPreconditioner, SolveConfig, SolveReport, pcg_solve
from .polyprec import make_preconditioner

__all__ = ["PrecondSpec", "SolveResult", "build_preconditioner", "solve_spd", "solve_dfn", "diagonal_test"]


@dataclass(frozen=True)
class PrecondSpec:
    """What to put around PCG.  ``degree = 0`` means seed preconditioner only."""

    degree: int = 0
    xi: float = 0.0
    variant: str | None = None  # None picks Newton for degrees 2**j - 1
    lowrank: int = 0
    jacobi_seed: bool = True
    tol_eig: float = DEFAULT_TOL_EIG
    eig_seed: int = 0

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if not self.xi >= 0:
            raise ValueError("xi must be >= 0")
        if self.lowrank < 0:
            raise ValueError("lowrank rank must be >= 0")
        if self.variant not in (None, "newton", "chebyshev"):
            raise ValueError("variant must be newton or chebyshev")


@dataclass
class SolveResult:
    x: np.ndarray
    report: SolveReport
    bounds: SpectralBounds | None = None
    extra: dict | None = None

    def to_dict(self, with_history: bool = False) -> dict:
        d = self.report.to_dict(with_history)
        if self.bounds is not None:
            d["bounds"] = asdict(self.bounds)
        if self.extra:
            d.update(self.extra)
        return d


def build_preconditioner(op: LinearOperator, spec: PrecondSpec, bounds: SpectralBounds | None = None,
                         eigvecs=None):
    """Polynomial (plus optional spectral correction) preconditioner for ``op``.

    Returns ``(preconditioner, bounds)``.  ``bounds`` and ``eigvecs`` skip the
    corresponding estimation steps when already known.
    """
    need_bounds = spec.degree > 0 or spec.variant is not None
    if need_bounds and bounds is None:
        bounds = estimate_extremes(op, spec.tol_eig, spec.eig_seed)
    if bounds is not None:
        bounds = bounds.with_xi(spec.xi)
    prec = make_preconditioner(op, bounds, spec.degree, spec.variant) if need_bounds \
        else IdentityPreconditioner(op.dim)
    if spec.lowrank:
        if eigvecs is None:
            eigvecs = leftmost_eigenpairs(op, spec.lowrank, spec.tol_eig, spec.eig_seed).vectors
        V = np.asarray(eigvecs, dtype=np.float64).reshape(op.dim, -1)[:, : spec.lowrank]
        if not hasattr(prec, "operator"):
            prec.operator = op
        prec = CorrectedPreconditioner(prec, build_correction(op, V))
    return prec, bounds


def solve_spd(op: LinearOperator, b, spec: PrecondSpec = PrecondSpec(), cfg: SolveConfig | None = None,
              diag=None, bounds: SpectralBounds | None = None, eigvecs=None) -> SolveResult:
    """Solve A x = b.  With ``diag`` (and ``spec.jacobi_seed``) PCG runs on D^-1/2 A D^-1/2.

    ``bounds`` and ``eigvecs`` refer to the operator PCG actually sees.
    """
    cfg = cfg or SolveConfig()
    b = np.asarray(b, dtype=np.float64)
    t0 = time.perf_counter()
    work = make_scaled_operator(op, diag) if (diag is not None and spec.jacobi_seed) else op
    rhs = work.scale_rhs(b) if isinstance(work, ScaledOperator) else b
    prec, bounds = build_preconditioner(work, spec, bounds, eigvecs)
    setup = time.perf_counter() - t0
    y, rep = pcg_solve(work, rhs, prec, cfg, setup_seconds=setup)
    x = work.unscale_solution(y) if isinstance(work, ScaledOperator) else y
    return SolveResult(x, rep, bounds)


def solve_dfn(system: DfnBlockSystem, spec: PrecondSpec = PrecondSpec(), cfg: SolveConfig | None = None,
              check_admissible: bool = True) -> SolveResult:
    """Schur complement solve in the trace unknowns, then recovery of head and multipliers."""
    cfg = cfg or SolveConfig()
    t0 = time.perf_counter()
    chol = factor_blocks(system.A)
    op = make_schur_operator(system, chol, check_admissible=check_admissible)
    r = schur_rhs(system, chol)
    diag = schur_diag(system, chol) if spec.jacobi_seed else None
    op.diag_scale = diag
    setup = time.perf_counter() - t0
    res = solve_spd(op, r, spec, cfg, diag=diag)
    res.report.setup_seconds += setup
    h, p = recover_hp(system, chol, res.x)
    res.extra = {"residual": permuted_residual(system, h, p, res.x), "nh": system.nh, "nu": system.nu}
    res.x = np.concatenate([h, p, res.x])
    return res


def diagonal_test(n: int):
    """The diagonal benchmark A = diag(1, ..., n) with its exact spectral bounds."""
    from .linop import diagonal_operator

    if n < 2:
        raise ValueError("n must be >= 2")
    d = np.arange(1, n + 1, dtype=np.float64)
    return diagonal_operator(d), SpectralBounds(1.0, float(n))
