"""Matrix-free linear operators.

Every solver component only calls ``op.apply(x)``.  Each call counts as one
application of the system operator on ``op.counter``.
"""
from __future__ import annotations

import copy

import numpy as np

from .sparse import BlockDiagMatrix, CounterSet, CsrMatrix, dot, spmv

__all__ = [
    "LinearOperator",
    "ScaledOperator",
    "as_operator",
    "identity_operator",
    "diagonal_operator",
    "make_scaled_operator",
    "probe_symmetry",
]


class LinearOperator:
    """Square operator defined only through its action on vectors."""

    def __init__(self, dim: int, matvec, symmetric: bool = True, counter: CounterSet | None = None,
                 name: str = "operator"):
        self.dim = int(dim)
        self._matvec = matvec
        self.symmetric = symmetric
        self.counter = counter if counter is not None else CounterSet()
        self.name = name

    @property
    def shape(self):
        return (self.dim, self.dim)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: got {x.shape}, operator has dim {self.dim}")
        self.counter.mvp += 1
        y = self._matvec(x)
        if y.shape != (self.dim,):
            raise ValueError(f"{self.name}: apply changed vector length")
        return y

    __matmul__ = apply

    def with_counter(self, counter: CounterSet | None = None) -> "LinearOperator":
        """Shallow copy with its own counter, for concurrent independent solves."""
        new = copy.copy(self)
        new.counter = counter if counter is not None else CounterSet()
        return new

    def to_dense(self) -> np.ndarray:
        """Materialise column by column (testing only; costs ``dim`` applications)."""
        eye = np.eye(self.dim)
        return np.column_stack([self._matvec(eye[:, j]) for j in range(self.dim)])

    def __repr__(self):
        return f"<{type(self).__name__} {self.name} dim={self.dim}>"


def as_operator(m, symmetric: bool = True, counter: CounterSet | None = None) -> LinearOperator:
    """Wrap a CSR / block-diagonal matrix, dense array or existing operator."""
    if isinstance(m, LinearOperator):
        return m
    if isinstance(m, (CsrMatrix, BlockDiagMatrix)):
        if m.nrows != m.ncols:
            raise ValueError("operator must be square")
        return LinearOperator(m.nrows, lambda x: spmv(m, x), symmetric, counter, name="csr")
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("operator must be square")
    return LinearOperator(a.shape[0], lambda x: a @ x, symmetric, counter, name="dense")


def identity_operator(n: int) -> LinearOperator:
    return LinearOperator(n, lambda x: x.copy(), True, name="identity")


def diagonal_operator(d) -> LinearOperator:
    d = np.asarray(d, dtype=np.float64).copy()
    return LinearOperator(len(d), lambda x: d * x, True, name="diagonal")


class ScaledOperator(LinearOperator):
    """W^T A W with W = diag(scale); shares the inner operator's counter.

    ``scale`` is the factor W of a factored seed preconditioner W W^T.  Only
    coordinate-wise (diagonal) W is supported.
    """

    def __init__(self, inner: LinearOperator, scale):
        scale = np.asarray(scale, dtype=np.float64)
        if scale.shape != (inner.dim,):
            raise ValueError("scale length must equal operator dimension")
        if np.any(~(scale > 0)) or not np.all(np.isfinite(scale)):
            raise ValueError("scale must be strictly positive and finite")
        self.inner = inner
        self.scale = scale
        super().__init__(inner.dim, self._scaled, inner.symmetric, inner.counter,
                         name=f"scaled({inner.name})")

    def _scaled(self, x):
        return self.scale * self.inner._matvec(self.scale * x)

    def scale_rhs(self, b) -> np.ndarray:
        """Right-hand side of the scaled system: W^T b."""
        return self.scale * np.asarray(b, dtype=np.float64)

    def unscale_solution(self, xhat) -> np.ndarray:
        """Solution of the original system: x = W xhat."""
        return self.scale * np.asarray(xhat, dtype=np.float64)


def make_scaled_operator(a: LinearOperator, d) -> ScaledOperator:
    """Symmetric Jacobi scaling D^{-1/2} A D^{-1/2} for a positive array ``d``."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (a.dim,):
        raise ValueError("d must have one entry per row")
    if np.any(~(d > 0)):
        bad = int(np.flatnonzero(~(d > 0))[0])
        raise ValueError(f"non-positive scaling entry d[{bad}] = {d[bad]}")
    return ScaledOperator(a, 1.0 / np.sqrt(d))


def probe_symmetry(a, trials: int = 5, seed: int = 0) -> float:
    """Largest |<Ax, y> - <x, Ay>| over random unit vector pairs.

    Uses the raw action, so the probe does not disturb operation counters.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    mv = a._matvec if isinstance(a, LinearOperator) else a.apply
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(a.dim)
        y = rng.standard_normal(a.dim)
        x /= np.linalg.norm(x)
        y /= np.linalg.norm(y)
        worst = max(worst, abs(dot(mv(x), y) - dot(x, mv(y))))
    return worst
