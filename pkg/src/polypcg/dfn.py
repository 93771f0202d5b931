"""Matrix-free Schur complement for the permuted 3x3 block DFN system.

The permuted system in the unknowns (h, p, u) reads

    [  A      0    -C   ] [h]   [q]
    [  Gh     A   -aB   ] [p] = [0]
    [ -aB^T  -C^T  Gu   ] [u]   [0]

with ``a`` the regularisation parameter alpha.  Eliminating (h, p) leaves the
symmetric system S u = r with

    S = Gu - a B^T A^-1 C - a C^T A^-1 B + C^T A^-1 Gh A^-1 C,
    r = a B^T A^-1 q - C^T A^-1 Gh A^-1 q,

which is solved by PCG; A^-1 is applied through the exact block Cholesky
factor of A.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
from scipy.sparse.linalg import splu, spsolve_triangular

from .eigest import lanczos_ritz
from .linop import LinearOperator
from .sparse import (BlockDiagMatrix, CsrMatrix, _run, get_num_threads, read_block_structure,
                     read_matrix_market, spmv, spmv_transpose, write_block_structure,
                     write_matrix_market)

__all__ = [
    "DfnBlockSystem",
    "BlockCholesky",
    "SchurOperator",
    "FactorizationError",
    "InadmissibleAlphaError",
    "factor_blocks",
    "make_schur_operator",
    "schur_apply",
    "schur_diag",
    "schur_rhs",
    "recover_hp",
    "permuted_residual",
    "generate_synthetic",
    "save_system",
    "load_system",
]

#: blocks up to this size are factored densely, larger ones in banded storage
DENSE_BLOCK_LIMIT = 64


class FactorizationError(ValueError):
    def __init__(self, block: int, msg: str = ""):
        self.block = block
        super().__init__(msg or f"diagonal block {block} of A is not positive definite")


class InadmissibleAlphaError(ValueError):
    """The Schur complement is not positive definite for the chosen alpha."""


@dataclass
class DfnBlockSystem:
    A: BlockDiagMatrix
    Gh: BlockDiagMatrix
    Gu: CsrMatrix
    B: CsrMatrix
    C: CsrMatrix
    c_col_blocks: np.ndarray  # trace unknowns owned by each fracture (columns of C's blocks)
    alpha: float
    q: np.ndarray

    def __post_init__(self):
        self.c_col_blocks = np.asarray(self.c_col_blocks, dtype=np.int64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.alpha = float(self.alpha)
        self.validate()

    @property
    def nh(self) -> int:
        return self.A.nrows

    @property
    def nu(self) -> int:
        return self.Gu.nrows

    @property
    def nf(self) -> int:
        return self.A.nblocks

    @property
    def col_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.c_col_blocks)]).astype(np.int64)

    def validate(self, tol: float = 1e-12) -> None:
        nh, nu = self.nh, self.nu
        if self.Gh.nrows != nh or self.Gu.ncols != nu:
            raise ValueError("Gh must be nh x nh and Gu nu x nu")
        if self.B.shape != (nh, nu) or self.C.shape != (nh, nu):
            raise ValueError(f"B and C must be {nh} x {nu}")
        if self.q.shape != (nh,):
            raise ValueError("q must have length nh")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not np.array_equal(self.Gh.block_sizes, self.A.block_sizes):
            raise ValueError("Gh must share the block structure of A")
        if len(self.c_col_blocks) != self.nf or self.c_col_blocks.sum() != nu or np.any(self.c_col_blocks < 0):
            raise ValueError("C column blocks must give one nonnegative size per fracture summing to nu")
        for name, m in (("A", self.A.assemble()), ("Gh", self.Gh.assemble()), ("Gu", self.Gu)):
            sp = m.to_scipy()
            asym = abs(sp - sp.T).max() if sp.nnz else 0.0
            if asym > tol * max(1.0, abs(sp).max() if sp.nnz else 1.0):
                raise ValueError(f"{name} is not symmetric")
        # C must be fracture-local and B must agree with C wherever C is stored
        ro, co = self.A.offsets, self.col_offsets
        c = self.C.to_scipy().tocoo()
        frac_r = np.searchsorted(ro, c.row, side="right") - 1
        frac_c = np.searchsorted(co, c.col, side="right") - 1
        if np.any(frac_r != frac_c):
            raise ValueError("C has entries outside its fracture-local blocks")
        b = self.B.to_scipy()
        if c.nnz and np.any(np.asarray(b[c.row, c.col]).ravel() != c.data):
            raise ValueError("E = B - C must vanish on the nonzeros of C")

    def E(self) -> sps.csr_matrix:
        e = (self.B.to_scipy() - self.C.to_scipy()).tocsr()
        e.eliminate_zeros()
        return e


# ---------------------------------------------------------------------------
# block Cholesky


def _block_factor(block: CsrMatrix, index: int) -> sps.csr_matrix:
    n = block.nrows
    sp = block.to_scipy()
    if n <= DENSE_BLOCK_LIMIT:
        try:
            L = np.linalg.cholesky(sp.toarray())
        except np.linalg.LinAlgError:
            raise FactorizationError(index) from None
        return sps.csr_matrix(np.tril(L))
    coo = sp.tocoo()
    bw = int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0
    ab = np.zeros((bw + 1, n))
    low = coo.row >= coo.col
    ab[coo.row[low] - coo.col[low], coo.col[low]] = coo.data[low]
    try:
        cb = sla.cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError:
        raise FactorizationError(index) from None
    rows, cols, vals = [], [], []
    for k in range(bw + 1):
        j = np.arange(n - k)
        rows.append(j + k)
        cols.append(j)
        vals.append(cb[k, : n - k])
    L = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    L.eliminate_zeros()
    return L


class _Triangular:
    """Sparse triangular solve through SuperLU with the natural ordering.

    For a triangular matrix the unpivoted LU factorisation is the matrix
    itself (up to a diagonal), so ``solve`` is one forward or backward
    substitution sweep.  Falls back to ``spsolve_triangular`` if SuperLU
    permutes anything.
    """

    def __init__(self, T: sps.csr_matrix, lower: bool):
        self.T = T.tocsr()
        self.lower = lower
        self._lu = None
        if T.shape[0]:
            lu = splu(T.tocsc(), permc_spec="NATURAL", diag_pivot_thresh=0.0,
                      options={"SymmetricMode": True})
            ident = np.arange(T.shape[0])
            if np.array_equal(lu.perm_r, ident) and np.array_equal(lu.perm_c, ident):
                self._lu = lu

    def solve(self, v):
        if self.T.shape[0] == 0:
            return v.copy()
        if self._lu is not None:
            return self._lu.solve(v)
        return spsolve_triangular(self.T, v, lower=self.lower)


class BlockCholesky:
    """Exact Cholesky factor L_A of a block-diagonal SPD matrix, one factor per block."""

    def __init__(self, A: BlockDiagMatrix, factors):
        self.A = A
        self.factors = list(factors)
        self.offsets = A.offsets
        self.L = sps.block_diag(self.factors, format="csr") if self.factors else sps.csr_matrix((0, 0))
        self._strips: dict = {}

    def _solvers(self):
        nthreads = get_num_threads()
        if nthreads not in self._strips:
            part = self.A.partition(nthreads)
            solvers = []
            for lo, hi in part.strip_row_ranges:
                Ls = self.L[lo:hi, lo:hi].tocsr()
                solvers.append((lo, hi, _Triangular(Ls, True), _Triangular(Ls.T.tocsr(), False)))
            self._strips[nthreads] = solvers
        return self._strips[nthreads]

    def lower_dense(self, i: int) -> np.ndarray:
        return self.factors[i].toarray()

    def _sweep(self, v, which):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.A.nrows,):
            raise ValueError("dimension mismatch in triangular solve")
        out = np.empty_like(v)
        solvers = self._solvers()

        def work(s):
            lo, hi = s[0], s[1]
            out[lo:hi] = s[which].solve(v[lo:hi])

        _run([lambda s=s: work(s) for s in solvers])
        return out

    def forward(self, v):
        """Solve L_A u = v."""
        return self._sweep(v, 2)

    def backward(self, v):
        """Solve L_A^T u = v."""
        return self._sweep(v, 3)

    def solve(self, v):
        """A^-1 v as one forward and one backward substitution."""
        return self.backward(self.forward(v))


def factor_blocks(A: BlockDiagMatrix) -> BlockCholesky:
    """Factor every diagonal block independently (in parallel over blocks)."""
    part = A.partition(get_num_threads())
    ranges = A.strip_block_ranges(part)
    factors = [None] * A.nblocks

    def work(b0, b1):
        for i in range(b0, b1):
            factors[i] = _block_factor(A.blocks[i], i)

    _run([lambda r=r: work(*r) for r in ranges])
    return BlockCholesky(A, factors)


# ---------------------------------------------------------------------------
# Schur complement


class SchurOperator(LinearOperator):
    """S_u(alpha) applied matrix-free (6 triangular solves + 7 sparse products)."""

    def __init__(self, system: DfnBlockSystem, chol: BlockCholesky, counter=None):
        self.system = system
        self.chol = chol
        self.diag_scale = None
        super().__init__(system.nu, lambda r: schur_apply(self, r), True, counter, name="schur")


def schur_apply(op: SchurOperator, r) -> np.ndarray:
    s, ch = op.system, op.chol
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (s.nu,):
        raise ValueError(f"dimension mismatch: r has shape {r.shape}, expected ({s.nu},)")
    v = spmv(s.C, r)
    z = spmv(s.B, r)
    u = ch.forward(v)
    t = ch.backward(u)
    u = ch.forward(z)
    w = ch.backward(u)
    z = spmv(s.Gu, r) - s.alpha * (spmv_transpose(s.B, t) + spmv_transpose(s.C, w))
    v = spmv(s.Gh, t)
    u = ch.forward(v)
    w = ch.backward(u)
    return z + spmv_transpose(s.C, w)


def make_schur_operator(system: DfnBlockSystem, chol: BlockCholesky | None = None,
                        check_admissible: bool = True, lanczos_steps: int = 40) -> SchurOperator:
    """Factor A (if needed) and wrap S_u; optionally reject alpha giving an indefinite S_u."""
    chol = chol or factor_blocks(system.A)
    op = SchurOperator(system, chol)
    if check_admissible:
        lo, hi = lanczos_ritz(op, steps=lanczos_steps)
        if not lo > 1e-14 * abs(hi):
            raise InadmissibleAlphaError(
                f"S_u(alpha={system.alpha}) has a non-positive Ritz value {lo:.3e}; "
                "try a smaller alpha")
    return op


def schur_diag(system: DfnBlockSystem, chol: BlockCholesky) -> np.ndarray:
    """diag(S_u) without forming S_u, one fracture at a time.

    With Z = A^-1 C and T = Gh Z - 2 alpha B, entry j is (Gu)_jj + z_j^T t_j.
    C is fracture-local, so column j of Z lives on the rows of the fracture
    owning trace unknown j and only that block of T is needed.
    """
    s = system
    gu_diag = s.Gu.diagonal_values()
    out = np.array(gu_diag, dtype=np.float64)
    C = s.C.to_scipy()
    B = s.B.to_scipy()
    ro, co = s.A.offsets, s.col_offsets
    part = s.A.partition(get_num_threads())
    ranges = s.A.strip_block_ranges(part)

    def work(b0, b1):
        for i in range(b0, b1):
            lo, hi, clo, chi = ro[i], ro[i + 1], co[i], co[i + 1]
            if chi == clo:
                continue
            Ci = C[lo:hi, clo:chi].toarray()
            Li = chol.factors[i].toarray()
            Zi = sla.solve_triangular(Li, sla.solve_triangular(Li, Ci, lower=True), lower=True, trans="T")
            Ti = s.Gh.blocks[i].to_scipy() @ Zi - 2.0 * s.alpha * B[lo:hi, clo:chi].toarray()
            out[clo:chi] += np.einsum("ij,ij->j", Zi, Ti)

    _run([lambda r=r: work(*r) for r in ranges])
    if np.any(~(out > 0)):
        j = int(np.flatnonzero(~(out > 0))[0])
        raise InadmissibleAlphaError(
            f"diag(S_u)[{j}] = {out[j]:.3e} is not positive for alpha={s.alpha}; try a smaller alpha")
    return out


def schur_rhs(system: DfnBlockSystem, chol: BlockCholesky) -> np.ndarray:
    """r = W^T M^-1 f1 = alpha B^T A^-1 q - C^T A^-1 Gh A^-1 q."""
    s = system
    t = chol.solve(s.q)
    w = chol.solve(spmv(s.Gh, t))
    return s.alpha * spmv_transpose(s.B, t) - spmv_transpose(s.C, w)


def recover_hp(system: DfnBlockSystem, chol: BlockCholesky, u):
    """Head and multipliers from the trace unknowns: h = A^-1(q + Cu), p = A^-1(alpha Bu - Gh h)."""
    s = system
    u = np.asarray(u, dtype=np.float64)
    h = chol.solve(s.q + spmv(s.C, u))
    p = chol.solve(s.alpha * spmv(s.B, u) - spmv(s.Gh, h))
    return h, p


def permuted_residual(system: DfnBlockSystem, h, p, u) -> dict:
    """Block residuals of the permuted system, relative to ||q||."""
    s = system
    r1 = spmv(s.A, h) - spmv(s.C, u) - s.q
    r2 = spmv(s.Gh, h) + spmv(s.A, p) - s.alpha * spmv(s.B, u)
    r3 = -s.alpha * spmv_transpose(s.B, h) - spmv_transpose(s.C, p) + spmv(s.Gu, u)
    fn = np.linalg.norm(s.q) or 1.0
    blocks = [float(np.linalg.norm(r) / fn) for r in (r1, r2, r3)]
    total = float(math.sqrt(sum(b * b for b in blocks)))
    return {"h_row": blocks[0], "p_row": blocks[1], "u_row": blocks[2], "total": total}


# ---------------------------------------------------------------------------
# synthetic generator


def _path_laplacian(k: int) -> sps.csr_matrix:
    if k == 1:
        return sps.csr_matrix((1, 1))
    d = np.full(k, 2.0)
    d[0] = d[-1] = 1.0
    e = -np.ones(k - 1)
    return sps.diags([e, d, e], [-1, 0, 1], format="csr")


def _grid_laplacian(nx: int, ny: int, dirichlet: bool) -> sps.csr_matrix:
    """Graph Laplacian of an nx x ny grid; ``dirichlet`` adds boundary springs (SPD)."""
    L = sps.kron(sps.identity(ny), _path_laplacian(nx)) + sps.kron(_path_laplacian(ny), sps.identity(nx))
    if dirichlet:
        L = L + sps.diags(np.full(nx * ny, 1.0) + _boundary_mask(nx, ny))
    return sps.csr_matrix(L)


def _boundary_mask(nx, ny):
    m = np.zeros((ny, nx))
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = 1.0
    return m.ravel()


def _draw_system(nf, avg_block, trace_density, alpha, rng):
    sizes, A_blocks, Gh_blocks = [], [], []
    for _ in range(nf):
        target = max(1.0, avg_block * rng.uniform(0.5, 1.5))
        nx = max(1, int(round(math.sqrt(target))))
        ny = max(1, int(round(target / nx)))
        K = 10.0 ** rng.uniform(-1.0, 1.0)
        A_blocks.append(K * _grid_laplacian(nx, ny, True))
        Gh_blocks.append(rng.uniform(0.5, 1.5) * _grid_laplacian(nx, ny, False))
        sizes.append(nx * ny)
    h_off = np.concatenate([[0], np.cumsum(sizes)])

    # traces: a random spanning chain keeps the network connected, plus extra pairs
    perm = rng.permutation(nf)
    pairs = {tuple(sorted((int(perm[i]), int(perm[i + 1])))) for i in range(nf - 1)}
    for _ in range(int(round(trace_density * nf))):
        i, j = rng.choice(nf, 2, replace=False)
        pairs.add(tuple(sorted((int(i), int(j)))))
    pairs = sorted(pairs)

    # each trace carries n_t unknowns on each side; unknowns are numbered fracture by fracture
    owned = [[] for _ in range(nf)]  # per fracture: list of (trace, slot)
    layout = []
    for k, (i, j) in enumerate(pairs):
        nt = int(rng.integers(1, 3))
        layout.append((i, j, nt))
        for slot in range(nt):
            owned[i].append((k, slot))
            owned[j].append((k, slot))
    col_blocks = np.array([len(o) for o in owned], dtype=np.int64)
    c_off = np.concatenate([[0], np.cumsum(col_blocks)])
    index = {}
    for f in range(nf):
        for pos, key in enumerate(owned[f]):
            index[(f,) + key] = c_off[f] + pos
    nh, nu = int(h_off[-1]), int(c_off[-1])

    Crow, Ccol, Cval, Erow, Ecol, Eval = [], [], [], [], [], []
    Gr, Gc, Gv = [], [], []
    for k, (i, j, nt) in enumerate(layout):
        for slot in range(nt):
            for me, other in ((i, j), (j, i)):
                col = index[(me, k, slot)]
                nodes = rng.choice(sizes[me], size=min(2, sizes[me]), replace=False)
                for node in nodes:
                    Crow.append(h_off[me] + node)
                    Ccol.append(col)
                    Cval.append(rng.uniform(0.5, 1.0))
                # E couples this unknown to a head node of the fracture across the trace
                Erow.append(h_off[other] + int(rng.integers(sizes[other])))
                Ecol.append(col)
                Eval.append(rng.uniform(-0.1, 0.1))
            a, b = index[(i, k, slot)], index[(j, k, slot)]
            m = rng.uniform(0.5, 1.0)
            Gr += [a, a, b, b]
            Gc += [a, b, a, b]
            Gv += [m, m, m, m]
    C = sps.csr_matrix((Cval, (Crow, Ccol)), shape=(nh, nu))
    E = sps.csr_matrix((Eval, (Erow, Ecol)), shape=(nh, nu))
    Gcoup = sps.csr_matrix((Gv, (Gr, Gc)), shape=(nu, nu))

    # diagonal part of Gu dominates the -2 alpha C^T A^-1 C contribution fracture by fracture
    gdiag = np.zeros(nu)
    for f in range(nf):
        lo, hi, clo, chi = h_off[f], h_off[f + 1], c_off[f], c_off[f + 1]
        if chi == clo:
            continue
        Ci = C[lo:hi, clo:chi].toarray()
        H = Ci.T @ np.linalg.solve(A_blocks[f].toarray(), Ci)
        rho = float(np.linalg.eigvalsh(H)[-1])
        gdiag[clo:chi] = 2.0 * alpha * rho * rng.uniform(1.3, 2.0)
    scale = float(np.mean(gdiag[gdiag > 0])) if np.any(gdiag > 0) else 1.0
    Gu = (Gcoup * (10.0 * scale) + sps.diags(gdiag)).tocsr()
    B = (C + E).tocsr()
    q = rng.standard_normal(nh)

    return DfnBlockSystem(
        BlockDiagMatrix([CsrMatrix.from_scipy(b) for b in A_blocks]),
        BlockDiagMatrix([CsrMatrix.from_scipy(g) for g in Gh_blocks]),
        CsrMatrix.from_scipy(Gu), CsrMatrix.from_scipy(B), CsrMatrix.from_scipy(C),
        col_blocks, alpha, q,
    )


def generate_synthetic(nf: int, avg_block: int = 16, trace_density: float = 0.5, alpha: float = 1.0,
                       seed: int = 0, max_retries: int = 5) -> DfnBlockSystem:
    """Random DFN-like block system whose Schur complement passes an SPD probe.

    A has 2-D Laplacian-like SPD blocks, Gh rank-deficient grid Laplacians,
    C fracture-local couplings, E cross-fracture couplings, Gu trace
    couplings between the two sides of each trace plus a diagonal part.
    """
    if nf < 2:
        raise ValueError("need at least two fractures")
    if avg_block < 1 or trace_density < 0 or not alpha > 0:
        raise ValueError("avg_block, trace_density and alpha must be positive")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        system = _draw_system(nf, avg_block, trace_density, alpha, rng)
        try:
            make_schur_operator(system, check_admissible=True)
            return system
        except InadmissibleAlphaError:
            continue
    raise InadmissibleAlphaError(f"no admissible system after {max_retries} draws; change alpha")


# ---------------------------------------------------------------------------
# files

_FILES = ("A", "Gh", "Gu", "B", "C")


def save_system(system: DfnBlockSystem, directory) -> None:
    """Five MatrixMarket files, .blk sidecars, alpha.txt and q.txt (one value per line).

    ``A.blk`` and ``Gh.blk`` list diagonal block sizes; ``C.blk`` lists the
    number of trace unknowns (columns) owned by each fracture, its row blocks
    being those of A.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix_market(system.A.assemble(), d / "A.mtx")
    write_matrix_market(system.Gh.assemble(), d / "Gh.mtx")
    write_matrix_market(system.Gu, d / "Gu.mtx")
    write_matrix_market(system.B, d / "B.mtx")
    write_matrix_market(system.C, d / "C.mtx")
    write_block_structure(system.A.block_sizes, d / "A.blk")
    write_block_structure(system.Gh.block_sizes, d / "Gh.blk")
    with open(d / "C.blk", "w") as fh:
        for s in system.c_col_blocks:
            fh.write(f"{int(s)}\n")
    (d / "alpha.txt").write_text(f"{system.alpha!r}\n")
    with open(d / "q.txt", "w") as fh:
        for v in system.q:
            fh.write(f"{float(v)!r}\n")


def load_system(directory) -> DfnBlockSystem:
    d = Path(directory)
    missing = [f"{n}.mtx" for n in _FILES if not (d / f"{n}.mtx").exists()]
    missing += [f for f in ("A.blk", "C.blk", "alpha.txt", "q.txt") if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    mats = {n: read_matrix_market(d / f"{n}.mtx") for n in _FILES}
    a_blk = read_block_structure(d / "A.blk", mats["A"].nrows)
    gh_blk = read_block_structure(d / "Gh.blk", mats["Gh"].nrows) if (d / "Gh.blk").exists() else a_blk
    c_blk = []
    for line in (d / "C.blk").read_text().split():
        v = int(line)
        if v < 0:
            raise ValueError("C.blk entries must be nonnegative")
        c_blk.append(v)
    if sum(c_blk) != mats["C"].ncols:
        raise ValueError("C.blk sizes do not sum to the number of columns of C")
    alpha = float((d / "alpha.txt").read_text().strip())
    q = np.array([float(t) for t in (d / "q.txt").read_text().split()])
    return DfnBlockSystem(
        BlockDiagMatrix.from_csr(mats["A"], a_blk), BlockDiagMatrix.from_csr(mats["Gh"], gh_blk),
        mats["Gu"], mats["B"], mats["C"], np.array(c_blk), alpha, q,
    )


def describe(system: DfnBlockSystem) -> dict:
    return {"nf": system.nf, "nh": system.nh, "nu": system.nu, "alpha": system.alpha,
            "nnz": {"A": system.A.assemble().nnz, "Gh": system.Gh.assemble().nnz,
                    "Gu": system.Gu.nnz, "B": system.B.nnz, "C": system.C.nnz}}


def dumps_describe(system) -> str:
    return json.dumps(describe(system))
