"""Matrix-free polynomial-preconditioned conjugate gradient solvers."""

__version__ = "0.1.0"

from .eigest import SpectralBounds, estimate_extremes, leftmost_eigenpairs
from .linop import LinearOperator, as_operator, diagonal_operator, make_scaled_operator
from .pcg import SolveConfig, SolveReport, pcg_solve
from .polyprec import (build_chebyshev, build_newton, eval_scalar, make_preconditioner,
                       preconditioned_spectrum_report)
from .sparse import BlockDiagMatrix, CsrMatrix, get_num_threads, set_num_threads

__all__ = [
    "__version__",
    "SpectralBounds",
    "estimate_extremes",
    "leftmost_eigenpairs",
    "LinearOperator",
    "as_operator",
    "diagonal_operator",
    "make_scaled_operator",
    "SolveConfig",
    "SolveReport",
    "pcg_solve",
    "build_chebyshev",
    "build_newton",
    "eval_scalar",
    "make_preconditioner",
    "preconditioned_spectrum_report",
    "BlockDiagMatrix",
    "CsrMatrix",
    "get_num_threads",
    "set_num_threads",
]
