"""Low-accuracy extremal eigenvalue estimation for SPD operators.

The leftmost eigenpairs are found by nonlinear conjugate-gradient
minimisation of the Rayleigh quotient with deflation against already
converged vectors (DACG).  The largest eigenvalue is the reciprocal of the
leftmost eigenvalue of the pencil (I, A), i.e. of the quotient x'x / x'Ax,
which needs nothing but applications of A.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .linop import LinearOperator

__all__ = [
    "SpectralBounds",
    "EigenPairSet",
    "EigenConvergenceError",
    "dacg",
    "estimate_extremes",
    "leftmost_eigenpairs",
    "lanczos_ritz",
    "DEFAULT_TOL_EIG",
    "BETA_SAFETY",
]

DEFAULT_TOL_EIG = 1e-3
#: inflation applied to a loose largest-eigenvalue estimate before building a polynomial
BETA_SAFETY = 1.01


class EigenConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpectralBounds:
    """Spectral interval [alpha, beta] plus the de-clustering parameter ``xi``.

    ``safety`` multiplies ``beta`` when a polynomial is built from these
    bounds; it is 1 for exact bounds and ``BETA_SAFETY`` for loose estimates.
    """

    alpha: float
    beta: float
    xi: float = 0.0
    safety: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta >= self.alpha and math.isfinite(self.beta)):
            raise ValueError(f"invalid spectral bounds alpha={self.alpha}, beta={self.beta}")
        if not self.xi >= 0:
            raise ValueError("xi must be >= 0")
        if not self.safety >= 1:
            raise ValueError("safety factor must be >= 1")

    @property
    def beta_for_polynomial(self) -> float:
        return self.beta * self.safety

    def with_xi(self, xi: float) -> "SpectralBounds":
        return replace(self, xi=float(xi))


@dataclass
class EigenPairSet:
    values: np.ndarray  # ascending
    vectors: np.ndarray  # n x p, orthonormal columns
    iterations: list

    @property
    def p(self) -> int:
        return len(self.values)


def _line_min(a, b, c, e, f, h):
    """Step t minimising (a + 2tb + t^2c) / (e + 2tf + t^2h)."""
    qa = c * f - b * h
    qb = c * e - a * h
    qc = b * e - a * f
    if abs(qa) <= 1e-300 + 1e-14 * (abs(qb) + abs(qc)):
        roots = [-qc / qb] if qb != 0 else [0.0]
    else:
        disc = max(qb * qb - 4 * qa * qc, 0.0)
        sq = math.sqrt(disc)
        # numerically stable pair of roots
        tmp = -0.5 * (qb + math.copysign(sq, qb))
        roots = [tmp / qa, qc / tmp if tmp != 0 else 0.0]

    def q(t):
        den = e + 2 * t * f + t * t * h
        return (a + 2 * t * b + t * t * c) / den if den > 0 else math.inf

    return min(roots, key=q)


def dacg(num_op, den_op, n: int, tol: float, maxit: int, x0, deflate=None):
    """Minimise x'Nx / x'Dx for SPD ``num_op``/``den_op`` (callables).

    ``deflate`` is an n x k array of D-orthonormal vectors the iterate must
    stay D-orthogonal to, paired with ``D @ deflate``.  Returns
    ``(q, x, Nx, Dx, iterations)`` with x'Dx = 1.
    """
    if deflate is not None:
        U, DU = deflate
    else:
        U = DU = None

    def project(v):
        if U is None or U.shape[1] == 0:
            return v
        return v - U @ (DU.T @ v)

    x = project(np.asarray(x0, dtype=float).copy())
    Nx, Dx = num_op(x), den_op(x)
    s = math.sqrt(x @ Dx)
    x, Nx, Dx = x / s, Nx / s, Dx / s
    d = None
    g_old = None
    for it in range(maxit + 1):
        xDx = x @ Dx
        q = (x @ Nx) / xDx
        r = Nx - q * Dx
        if np.linalg.norm(r) <= tol * abs(q) * np.linalg.norm(Dx):
            return q, x, Nx, Dx, it
        if it == maxit:
            break
        g = 2.0 * r / xDx
        if d is None or it % 50 == 0:
            d = -g
        else:
            beta = max(0.0, g @ (g - g_old) / (g_old @ g_old))
            d = -g + beta * d
        g_old = g
        d = project(d)
        dn = np.linalg.norm(d)
        if dn == 0:
            return q, x, Nx, Dx, it
        ds = d / dn
        Nd, Dd = num_op(ds), den_op(ds)
        t = _line_min(x @ Nx, x @ Nd, ds @ Nd, xDx, x @ Dd, ds @ Dd)
        x = x + t * ds
        Nx = Nx + t * Nd
        Dx = Dx + t * Dd
        if it % 20 == 19:
            # refresh to stop drift of the updated products
            x = project(x)
            Nx, Dx = num_op(x), den_op(x)
        s = math.sqrt(x @ Dx)
        x, Nx, Dx = x / s, Nx / s, Dx / s
    raise EigenConvergenceError(f"DACG did not converge in {maxit} iterations (q={q:.6g})")


def _max_iters(n: int) -> int:
    return int(50 * math.sqrt(n)) + 1


def leftmost_eigenpairs(a: LinearOperator, p: int, tol_eig: float = DEFAULT_TOL_EIG,
                        seed: int = 0, maxit: int | None = None) -> EigenPairSet:
    """``p`` approximate leftmost eigenpairs, one deflated DACG run per pair."""
    n = a.dim
    if p < 1 or p >= n:
        raise ValueError(f"need 1 <= p < dim, got p={p}, dim={n}")
    if not 0 < tol_eig < 1:
        raise ValueError("tol_eig must lie in (0, 1)")
    maxit = maxit or _max_iters(n)
    rng = np.random.default_rng(seed)
    ident = lambda v: v
    U = np.zeros((n, 0))
    vals, its = [], []
    for _ in range(p):
        q, x, _, _, it = dacg(a.apply, ident, n, tol_eig, maxit, rng.standard_normal(n), (U, U))
        # re-orthogonalise (two passes of classical Gram-Schmidt) before storing
        for _ in range(2):
            x = x - U @ (U.T @ x)
        x /= np.linalg.norm(x)
        U = np.column_stack([U, x])
        vals.append(q)
        its.append(it)
    order = np.argsort(vals)
    return EigenPairSet(np.asarray(vals)[order], U[:, order], [its[i] for i in order])


def estimate_extremes(a: LinearOperator, tol_eig: float = DEFAULT_TOL_EIG, seed: int = 0,
                      maxit: int | None = None) -> SpectralBounds:
    """Estimate (alpha, beta) of an SPD operator to relative accuracy ``tol_eig``.

    ``alpha`` is the Rayleigh quotient of the leftmost DACG vector; ``beta`` is
    the reciprocal of the leftmost quotient of the (I, A) pencil, which is a
    lower bound on the true largest eigenvalue, so a safety factor is attached
    for loose tolerances.
    """
    n = a.dim
    if n < 2:
        raise ValueError("operator dimension must be >= 2")
    if not 0 < tol_eig < 1:
        raise ValueError("tol_eig must lie in (0, 1)")
    maxit = maxit or _max_iters(n)
    rng = np.random.default_rng(seed)
    alpha, *_ = dacg(a.apply, lambda v: v, n, tol_eig, maxit, rng.standard_normal(n))
    mu, *_ = dacg(lambda v: v, a.apply, n, tol_eig, maxit, rng.standard_normal(n))
    beta = 1.0 / mu
    if alpha <= 0 or beta <= 0:
        raise EigenConvergenceError("operator does not appear to be positive definite")
    alpha, beta = min(alpha, beta), max(alpha, beta)
    safety = BETA_SAFETY if tol_eig >= 1e-3 else 1.0
    return SpectralBounds(float(alpha), float(beta), 0.0, safety)


def lanczos_ritz(a: LinearOperator, steps: int = 30, seed: int = 0) -> tuple[float, float]:
    """Smallest and largest Ritz values after a short fully reorthogonalised Lanczos run."""
    n = a.dim
    steps = max(1, min(steps, n))
    rng = np.random.default_rng(seed)
    Q = np.zeros((n, steps))
    alphas, betas = [], []
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    for j in range(steps):
        Q[:, j] = q
        w = a._matvec(q)
        alphas.append(q @ w)
        w = w - Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        w = w - Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        b = np.linalg.norm(w)
        if j == steps - 1 or b <= 1e-13 * max(1.0, abs(alphas[-1])):
            break
        betas.append(b)
        q = w / b
    k = len(alphas)
    T = np.diag(alphas) + np.diag(betas[: k - 1], 1) + np.diag(betas[: k - 1], -1)
    ev = np.linalg.eigvalsh(T)
    return float(ev[0]), float(ev[-1])
