"""Newton and Chebyshev polynomial preconditioners with the xi de-clustering shift.

Both variants are built from a spectral interval [alpha, beta] and a small
``xi >= 0`` that inflates the centre of the interval,

    theta_bar = (alpha + beta) / 2 * (1 + xi),      delta = (beta - alpha) / 2,

and ``theta_bar`` replaces the centre everywhere it appears.  For the Newton
variant this means the first level starts from the scaled left endpoint
``1 - delta / theta_bar`` (equal to ``alpha / theta`` when xi = 0), which keeps
the Newton polynomial of degree 2**nlev - 1 identical to the Chebyshev one of
the same degree for every xi.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .eigest import SpectralBounds

__all__ = [
    "NewtonCoeffs",
    "ChebCoeffs",
    "PolyPreconditioner",
    "SpectrumReport",
    "MAX_NLEV",
    "MAX_DEGREE",
    "build_newton",
    "build_chebyshev",
    "apply_newton",
    "apply_chebyshev",
    "eval_scalar",
    "preconditioned_spectrum_report",
    "unclustering_threshold",
    "make_preconditioner",
]

MAX_NLEV = 10
MAX_DEGREE = 2**MAX_NLEV - 1


@dataclass(frozen=True)
class NewtonCoeffs:
    nlev: int
    zetas: tuple
    theta_bar: float
    delta: float
    alpha: float
    beta: float
    xi: float

    @property
    def degree(self) -> int:
        return 2**self.nlev - 1

    def truncated(self, level: int) -> "NewtonCoeffs":
        """Coefficients of the intermediate preconditioner after ``level`` Newton steps."""
        if not 0 <= level <= self.nlev:
            raise ValueError(f"level must lie in [0, {self.nlev}]")
        return NewtonCoeffs(level, self.zetas[: level + 1], self.theta_bar, self.delta,
                            self.alpha, self.beta, self.xi)


@dataclass(frozen=True)
class ChebCoeffs:
    m: int
    theta_bar: float
    delta: float
    sigma: float
    rhos: tuple
    alpha: float
    beta: float
    xi: float

    @property
    def degree(self) -> int:
        return self.m


def _theta_delta(bounds: SpectralBounds):
    alpha = float(bounds.alpha)
    beta = float(bounds.beta_for_polynomial)
    theta_bar = 0.5 * (alpha + beta) * (1.0 + bounds.xi)
    return alpha, beta, theta_bar, 0.5 * (beta - alpha)


def build_newton(bounds: SpectralBounds, nlev: int) -> NewtonCoeffs:
    """Scaling factors zeta_0..zeta_nlev of the Newton (Hotelling) recursion.

    A degenerate interval (alpha == beta) gives zeta_i = 1 for i >= 1, so every
    level reproduces the exact scaling 1/theta_bar.
    """
    if not 0 <= nlev <= MAX_NLEV:
        raise ValueError(f"nlev must lie in [0, {MAX_NLEV}]")
    alpha, beta, theta_bar, delta = _theta_delta(bounds)
    zetas = [1.0 / theta_bar]
    if nlev >= 1:
        s = 1.0 - delta / theta_bar
        zetas.append(2.0 / (1.0 + 2.0 * s - s * s))
    for _ in range(2, nlev + 1):
        z = zetas[-1]
        zetas.append(2.0 / (1.0 + 2.0 * z - z * z))
    return NewtonCoeffs(nlev, tuple(zetas), theta_bar, delta, alpha, beta, float(bounds.xi))


def _newton_rec(zetas, j, matvec, v):
    if j == 0:
        return zetas[0] * v
    y = _newton_rec(zetas, j - 1, matvec, v)
    return zetas[j] * (2.0 * y - _newton_rec(zetas, j - 1, matvec, matvec(y)))


def apply_newton(coeffs: NewtonCoeffs, a, r) -> np.ndarray:
    """P_nlev r via P_{j+1} r = zeta_{j+1} (2 P_j r - P_j A P_j r); 2**nlev - 1 products."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (a.dim,):
        raise ValueError(f"dimension mismatch: r has shape {r.shape}, operator dim {a.dim}")
    return _newton_rec(coeffs.zetas, coeffs.nlev, a.apply, r)


def build_chebyshev(bounds: SpectralBounds, m: int) -> ChebCoeffs:
    if not 0 <= m <= MAX_DEGREE:
        raise ValueError(f"degree must lie in [0, {MAX_DEGREE}]")
    alpha, beta, theta_bar, delta = _theta_delta(bounds)
    if not delta > 0:
        raise ValueError("Chebyshev preconditioner needs alpha < beta; "
                         "use the Newton variant for a degenerate spectrum")
    sigma = theta_bar / delta
    rhos = [1.0 / sigma]
    for _ in range(m):
        rhos.append(1.0 / (2.0 * sigma - rhos[-1]))
    return ChebCoeffs(m, theta_bar, delta, sigma, tuple(rhos), alpha, beta, float(bounds.xi))


def apply_chebyshev(coeffs: ChebCoeffs, a, r) -> np.ndarray:
    """Three-term Chebyshev recurrence for P_m r; exactly m operator products."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (a.dim,):
        raise ValueError(f"dimension mismatch: r has shape {r.shape}, operator dim {a.dim}")
    th, de, sig, rho = coeffs.theta_bar, coeffs.delta, coeffs.sigma, coeffs.rhos
    x_old = r / th
    if coeffs.m == 0:
        return x_old
    x = (2.0 * rho[1] / de) * (2.0 * r - a.apply(r) / th)
    for k in range(2, coeffs.m + 1):
        z = (2.0 / de) * (r - a.apply(x))
        x_old, x = x, rho[k] * (2.0 * sig * x - rho[k - 1] * x_old + z)
    return x


class _Scalars:
    """Diagonal stand-in operator: runs a recurrence on many scalars at once."""

    def __init__(self, lam):
        self.lam = lam
        self.dim = len(lam)

    def apply(self, v):
        return self.lam * v


def eval_scalar(coeffs, lam, level: int | None = None):
    """Eigenvalue p(lambda) * lambda of the preconditioned operator.

    Works elementwise on arrays.  ``level`` evaluates an intermediate Newton
    preconditioner P_level instead of the full one.
    """
    scalar = np.ndim(lam) == 0
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    ones = np.ones_like(lam)
    op = _Scalars(lam)
    if isinstance(coeffs, NewtonCoeffs):
        c = coeffs if level is None else coeffs.truncated(level)
        p = apply_newton(c, op, ones)
    else:
        if level is not None:
            raise ValueError("level only applies to Newton coefficients")
        p = apply_chebyshev(coeffs, op, ones)
    out = p * lam
    return float(out[0]) if scalar else out


def unclustering_threshold(coeffs) -> float:
    """First-level threshold alpha_hat_eta + 2 (1 - eta) in units of lambda / theta_bar.

    Eigenvalues whose scaled value lies below it are mapped, in order, onto
    the smallest eigenvalues of the first-level preconditioned operator.
    """
    eta = 1.0 / (1.0 + coeffs.xi)
    return coeffs.alpha / coeffs.theta_bar + 2.0 * (1.0 - eta)


@dataclass
class SpectrumReport:
    original: np.ndarray  # ascending input eigenvalues
    mapped: np.ndarray  # p(lambda) * lambda, aligned with ``original``
    mapped_sorted: np.ndarray
    kappa: float
    kappa10: float
    degree: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def normalized(self) -> np.ndarray:
        """Sorted mapped eigenvalues divided by the largest one."""
        if len(self.mapped_sorted) == 0:
            return self.mapped_sorted
        return self.mapped_sorted / self.mapped_sorted[-1]

    def smallest(self, k: int) -> float:
        """k-th smallest normalised mapped eigenvalue (1-based)."""
        return float(self.normalized[k - 1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda_original", "lambda_mapped"])
            for lo, lm in zip(self.original, self.mapped):
                w.writerow([repr(float(lo)), repr(float(lm))])

    def summary(self) -> dict:
        out = {"n": int(len(self.original)), "degree": self.degree,
               "kappa": self.kappa, "kappa10": self.kappa10}
        for k in (1, 2, 5, 10):
            if len(self.mapped_sorted) >= k:
                out[f"lambda{k}"] = self.smallest(k)
        return out


def preconditioned_spectrum_report(coeffs, eigenvalues) -> SpectrumReport:
    """Map eigenvalues of A through the preconditioner and summarise conditioning.

    kappa = max / min and kappa10 = max / (10th smallest) of the mapped values;
    kappa10 is NaN when fewer than ten eigenvalues are given.
    """
    lam = np.sort(np.asarray(eigenvalues, dtype=np.float64).ravel())
    if np.any(lam <= 0):
        raise ValueError("eigenvalues must be positive")
    mapped = eval_scalar(coeffs, lam) if len(lam) else np.empty(0)
    ms = np.sort(mapped)
    if len(ms) == 0:
        kappa = kappa10 = math.nan
    else:
        kappa = float(ms[-1] / ms[0])
        kappa10 = float(ms[-1] / ms[9]) if len(ms) >= 10 else math.nan
    return SpectrumReport(lam, np.asarray(mapped), ms, kappa, kappa10, coeffs.degree)


class PolyPreconditioner:
    """P = p(A) applied matrix-free; one application costs ``degree`` products with A."""

    symmetric = True

    def __init__(self, variant: str, coeffs, operator):
        if variant not in ("newton", "chebyshev"):
            raise ValueError("variant must be 'newton' or 'chebyshev'")
        self.variant = variant
        self.coeffs = coeffs
        self.operator = operator
        self.dim = operator.dim

    @property
    def degree(self) -> int:
        return self.coeffs.degree

    def apply(self, r) -> np.ndarray:
        if self.variant == "newton":
            return apply_newton(self.coeffs, self.operator, r)
        return apply_chebyshev(self.coeffs, self.operator, r)

    def eval_scalar(self, lam):
        return eval_scalar(self.coeffs, lam)

    def __repr__(self):
        return f"<PolyPreconditioner {self.variant} degree={self.degree} xi={self.coeffs.xi}>"


def make_preconditioner(operator, bounds: SpectralBounds, degree: int,
                        variant: str | None = None) -> PolyPreconditioner:
    """Build a preconditioner of the requested degree.

    Degrees of the form 2**j - 1 use the Newton recursion unless ``variant``
    says otherwise; all other degrees need Chebyshev.  A degenerate interval
    always goes through Newton.
    """
    newton_ok = degree >= 0 and (degree + 1) & degree == 0
    if variant is None:
        variant = "newton" if newton_ok else "chebyshev"
    if bounds.alpha == bounds.beta_for_polynomial and variant == "chebyshev":
        if not newton_ok:
            raise ValueError("degenerate spectrum needs a Newton degree 2**j - 1")
        variant = "newton"
    if variant == "newton":
        if not newton_ok:
            raise ValueError(f"Newton degree must be 2**nlev - 1, got {degree}")
        return PolyPreconditioner("newton", build_newton(bounds, int(math.log2(degree + 1))), operator)
    return PolyPreconditioner("chebyshev", build_chebyshev(bounds, degree), operator)
