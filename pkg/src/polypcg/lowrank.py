"""Spectral low-rank correction P = P0 + V (V^T A V)^{-1} V^T of a preconditioner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

__all__ = ["SpectralCorrection", "CorrectedPreconditioner", "build_correction", "apply_corrected",
           "MAX_RANK"]

MAX_RANK = 50


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralCorrection:
    V: np.ndarray  # n x p, orthonormal columns
    small_factor: tuple  # scipy cho_factor of V^T A V
    projected: np.ndarray  # V^T A V

    @property
    def p(self) -> int:
        return self.V.shape[1]


def _mgs(V):
    V = np.array(V, dtype=np.float64, copy=True)
    for j in range(V.shape[1]):
        for i in range(j):
            V[:, j] -= (V[:, i] @ V[:, j]) * V[:, i]
        nrm = np.linalg.norm(V[:, j])
        if nrm <= 1e-12:
            raise ValueError(f"column {j} of V is linearly dependent on the previous ones")
        V[:, j] /= nrm
    return V


def build_correction(a, V) -> SpectralCorrection:
    """Orthonormalise V (modified Gram-Schmidt) and factor the p x p matrix V^T A V."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[0] != a.dim:
        raise ValueError("V must have one row per operator dimension")
    p = V.shape[1]
    if not 1 <= p <= MAX_RANK:
        raise ValueError(f"rank must lie in [1, {MAX_RANK}]")
    V = _mgs(V)
    AV = np.column_stack([a.apply(V[:, j]) for j in range(p)])
    H = V.T @ AV
    H = 0.5 * (H + H.T)
    try:
        fac = sla.cho_factor(H, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("V^T A V is not positive definite; "
                                       "the eigenvector estimates are unusable") from None
    V.setflags(write=False)
    return SpectralCorrection(V, fac, H)


def apply_corrected(p0, corr: SpectralCorrection, r, counter=None) -> np.ndarray:
    """P0 r + V (V^T A V)^{-1} V^T r; the projection needs no operator products."""
    coef = corr.V.T @ r
    if counter is not None:
        counter.proj_ddot += corr.p
        counter.axpy += corr.p
    return p0.apply(r) + corr.V @ sla.cho_solve(corr.small_factor, coef)


class CorrectedPreconditioner:
    symmetric = True

    def __init__(self, p0, corr: SpectralCorrection):
        if p0.dim != corr.V.shape[0]:
            raise ValueError("preconditioner and correction dimensions differ")
        self.p0 = p0
        self.corr = corr
        self.dim = p0.dim

    @property
    def degree(self) -> int:
        return getattr(self.p0, "degree", 0)

    @property
    def rank(self) -> int:
        return self.corr.p

    def apply(self, r) -> np.ndarray:
        counter = getattr(getattr(self.p0, "operator", None), "counter", None)
        return apply_corrected(self.p0, self.corr, r, counter)
