"""Sparse matrix storage, MatrixMarket I/O and strip-parallel kernels.

Matrices are split into horizontal strips of consecutive rows; each strip is
handled by one worker thread.  Row-wise kernels (``spmv``) are bitwise
independent of the strip count because every row is summed in storage order
by exactly one worker.  Reductions (``dot``, ``spmv_transpose``) are split
into a fixed number of leaves that do not depend on the thread count and the
leaf partials are combined by a fixed pairwise tree, so results (and hence
solver iteration counts) are identical for any number of threads.
"""
from __future__ import annotations

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sps

__all__ = [
    "CsrMatrix",
    "BlockDiagMatrix",
    "StripPartition",
    "CounterSet",
    "MatrixMarketError",
    "spmv",
    "spmv_transpose",
    "dot",
    "norm",
    "read_matrix_market",
    "write_matrix_market",
    "read_block_structure",
    "write_block_structure",
    "set_num_threads",
    "get_num_threads",
]

#: number of leaves in every reduction tree; independent of thread count
REDUCTION_LEAVES = 8

_state = threading.local()
_default_threads = max(1, int(os.environ.get("POLYPCG_THREADS", "1")))
_pools: dict[int, ThreadPoolExecutor] = {}
_pool_lock = threading.Lock()


def set_num_threads(n: int) -> None:
    """Set the number of worker threads used by kernels in this thread."""
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _state.threads = int(n)


def get_num_threads() -> int:
    return getattr(_state, "threads", _default_threads)


def _pool(n: int) -> ThreadPoolExecutor:
    with _pool_lock:
        if n not in _pools:
            _pools[n] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="polypcg")
        return _pools[n]


def _run(tasks):
    """Run zero-argument callables, in parallel when more than one thread is set."""
    nthreads = get_num_threads()
    if nthreads == 1 or len(tasks) == 1:
        return [t() for t in tasks]
    return list(_pool(nthreads).map(lambda t: t(), tasks))


def _tree_sum(parts):
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _even_ranges(n: int, k: int) -> list[tuple[int, int]]:
    k = max(1, min(k, n)) if n > 0 else 1
    edges = [(i * n) // k for i in range(k + 1)]
    return [(edges[i], edges[i + 1]) for i in range(k)]


@dataclass
class CounterSet:
    """Operation counters: operator applications, global inner products, vector updates.

    ``proj_ddot`` collects the small projection products of a low-rank
    correction so that the plain PCG dot-product law stays checkable.
    """

    mvp: int = 0
    ddot: int = 0
    axpy: int = 0
    proj_ddot: int = 0

    def reset(self) -> None:
        self.mvp = self.ddot = self.axpy = self.proj_ddot = 0

    def snapshot(self) -> dict:
        return {"mvp": self.mvp, "ddot": self.ddot, "axpy": self.axpy, "proj_ddot": self.proj_ddot}


@dataclass(frozen=True)
class StripPartition:
    nstrips: int
    strip_row_ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.strip_row_ranges) != self.nstrips:
            raise ValueError("nstrips does not match number of ranges")
        prev = 0
        for lo, hi in self.strip_row_ranges:
            if lo != prev or hi < lo:
                raise ValueError("strip ranges must be consecutive and cover all rows")
            prev = hi

    @property
    def nrows(self) -> int:
        return self.strip_row_ranges[-1][1] if self.strip_row_ranges else 0

    @classmethod
    def balanced(cls, row_weights, nstrips: int, boundaries=None) -> "StripPartition":
        """Greedy strips with roughly equal total weight (nonzeros).

        ``boundaries`` restricts cut points to the given row offsets (block starts),
        so that no block is split between two strips.
        """
        w = np.asarray(row_weights, dtype=float)
        n = len(w)
        if boundaries is None:
            cuts = np.arange(n + 1)
        else:
            cuts = np.asarray(boundaries, dtype=np.int64)
        nstrips = max(1, min(nstrips, len(cuts) - 1 if len(cuts) > 1 else 1))
        cum = np.concatenate([[0.0], np.cumsum(w)])
        total = cum[-1]
        ranges = []
        lo = 0
        for s in range(1, nstrips):
            target = total * s / nstrips
            # first admissible cut whose prefix weight reaches the target
            idx = int(np.searchsorted(cum[cuts], target))
            idx = min(max(idx, 0), len(cuts) - 1)
            hi = int(cuts[idx])
            if hi <= lo:
                continue
            if hi >= n:
                break
            ranges.append((lo, hi))
            lo = hi
        ranges.append((lo, n))
        return cls(len(ranges), tuple(ranges))


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Immutable compressed-sparse-row matrix with validated structure."""

    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ro = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        va = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "values", va)
        for a in (ro, ci, va):
            a.setflags(write=False)
        if len(ro) != self.nrows + 1 or ro[0] != 0 or ro[-1] != len(va) or len(ci) != len(va):
            raise ValueError("inconsistent CSR offsets")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.ncols):
            raise ValueError("column index out of bounds")
        if not np.all(np.isfinite(va)):
            raise ValueError("matrix stores NaN or Inf")
        if len(ci) > 1:
            step = np.diff(ci)
            row_start = np.zeros(len(ci), dtype=bool)
            row_start[ro[1:-1][ro[1:-1] < len(ci)]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ValueError("column indices must be strictly increasing within a row")

    # construction ----------------------------------------------------------
    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        m = sps.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a) -> "CsrMatrix":
        return cls.from_scipy(sps.csr_matrix(np.asarray(a, dtype=float)))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls.from_scipy(sps.identity(n, format="csr"))

    @classmethod
    def diagonal(cls, d) -> "CsrMatrix":
        return cls.from_scipy(sps.diags(np.asarray(d, dtype=float), format="csr"))

    # views -----------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def to_scipy(self) -> sps.csr_matrix:
        if "sp" not in self._cache:
            self._cache["sp"] = sps.csr_matrix(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape
            )
        return self._cache["sp"]

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal_values(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def partition(self, nstrips: int, boundaries=None) -> StripPartition:
        key = ("part", nstrips, None if boundaries is None else tuple(boundaries))
        if key not in self._cache:
            self._cache[key] = StripPartition.balanced(self.row_nnz() + 1, nstrips, boundaries)
        return self._cache[key]

    def _strip_blocks(self, part: StripPartition):
        key = ("strips", part.strip_row_ranges)
        if key not in self._cache:
            sp = self.to_scipy()
            self._cache[key] = [sp[lo:hi] for lo, hi in part.strip_row_ranges]
        return self._cache[key]

    def _leaf_blocks(self):
        if "leaves" not in self._cache:
            sp = self.to_scipy()
            self._cache["leaves"] = [
                (lo, hi, sp[lo:hi].T.tocsr()) for lo, hi in _even_ranges(self.nrows, REDUCTION_LEAVES)
            ]
        return self._cache["leaves"]

    def __matmul__(self, x):
        return spmv(self, x)


class BlockDiagMatrix:
    """Square block-diagonal matrix made of independent CSR blocks."""

    def __init__(self, blocks):
        self.blocks = tuple(blocks)
        for i, b in enumerate(self.blocks):
            if b.nrows != b.ncols:
                raise ValueError(f"block {i} is not square")
        self.block_sizes = np.array([b.nrows for b in self.blocks], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.block_sizes)]).astype(np.int64)
        self._assembled = None
        self._parts: dict = {}

    @property
    def nrows(self) -> int:
        return int(self.offsets[-1])

    ncols = nrows

    @property
    def shape(self):
        return (self.nrows, self.nrows)

    @property
    def nblocks(self) -> int:
        return len(self.blocks)

    @classmethod
    def from_csr(cls, m: CsrMatrix, block_sizes) -> "BlockDiagMatrix":
        """Split an assembled matrix into diagonal blocks; off-block entries are an error."""
        sizes = np.asarray(block_sizes, dtype=np.int64)
        if np.any(sizes <= 0):
            raise ValueError("block sizes must be positive")
        if sizes.sum() != m.nrows or m.nrows != m.ncols:
            raise ValueError("block sizes do not sum to the matrix dimension")
        sp = m.to_scipy()
        offs = np.concatenate([[0], np.cumsum(sizes)])
        blocks = []
        for lo, hi in zip(offs[:-1], offs[1:]):
            rows = sp[lo:hi]
            if rows.nnz and (rows.indices.min() < lo or rows.indices.max() >= hi):
                raise ValueError(f"entries outside diagonal block at rows {lo}:{hi}")
            blocks.append(CsrMatrix.from_scipy(rows[:, lo:hi]))
        return cls(blocks)

    def assemble(self) -> CsrMatrix:
        if self._assembled is None:
            self._assembled = CsrMatrix.from_scipy(
                sps.block_diag([b.to_scipy() for b in self.blocks], format="csr")
                if self.blocks
                else sps.csr_matrix((0, 0))
            )
        return self._assembled

    def partition(self, nstrips: int) -> StripPartition:
        if nstrips not in self._parts:
            weights = self.assemble().row_nnz() + 1
            self._parts[nstrips] = StripPartition.balanced(weights, nstrips, self.offsets)
        return self._parts[nstrips]

    def strip_block_ranges(self, part: StripPartition) -> list[tuple[int, int]]:
        """Map each strip to its contiguous range of block indices."""
        out = []
        for lo, hi in part.strip_row_ranges:
            b0 = int(np.searchsorted(self.offsets, lo))
            b1 = int(np.searchsorted(self.offsets, hi))
            out.append((b0, b1))
        return out

    def to_dense(self):
        return self.assemble().to_dense()

    def __matmul__(self, x):
        return spmv(self, x)


def _check_vec(x, n: int, what: str = "vector") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n:
        raise ValueError(f"dimension mismatch: {what} has shape {x.shape}, expected ({n},)")
    return x


def spmv(m, x) -> np.ndarray:
    """y = M x, rows split over strips (block boundaries respected)."""
    x = _check_vec(x, m.ncols)
    nthreads = get_num_threads()
    part = m.partition(nthreads)
    csr = m.assemble() if isinstance(m, BlockDiagMatrix) else m
    y = np.empty(m.nrows)
    strips = csr._strip_blocks(part)

    def work(k):
        lo, hi = part.strip_row_ranges[k]
        y[lo:hi] = strips[k] @ x

    _run([lambda k=k: work(k) for k in range(part.nstrips)])
    return y


def spmv_transpose(m: CsrMatrix, x) -> np.ndarray:
    """y = M^T x without an explicit transpose; leaf partials summed by a fixed tree."""
    if isinstance(m, BlockDiagMatrix):
        m = m.assemble()
    x = _check_vec(x, m.nrows)
    leaves = m._leaf_blocks()
    if m.nrows == 0:
        return np.zeros(m.ncols)
    parts = _run([lambda lf=lf: lf[2] @ x[lf[0]:lf[1]] for lf in leaves])
    return _tree_sum(parts)


def dot(x, y, counter: CounterSet | None = None) -> float:
    """Inner product with a thread-count independent reduction order."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    ranges = _even_ranges(len(x), REDUCTION_LEAVES)
    parts = _run([lambda lo=lo, hi=hi: float(np.dot(x[lo:hi], y[lo:hi])) for lo, hi in ranges])
    if counter is not None:
        counter.ddot += 1
    return float(_tree_sum(parts)) if parts else 0.0


def norm(x, counter: CounterSet | None = None) -> float:
    return math.sqrt(dot(x, x, counter))


# ---------------------------------------------------------------------------
# MatrixMarket


class MatrixMarketError(ValueError):
    pass


def read_matrix_market(path) -> CsrMatrix:
    """Read a real coordinate MatrixMarket file; symmetric storage is expanded."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[0].lower() != "%%matrixmarket":
            raise MatrixMarketError(f"{path}: malformed header")
        obj, fmt, field_, sym = (h.lower() for h in header[1:])
        if obj != "matrix" or fmt != "coordinate":
            raise MatrixMarketError(f"{path}: only coordinate matrices are supported")
        if field_ not in ("real", "integer", "double"):
            raise MatrixMarketError(f"{path}: unsupported field '{field_}'")
        if sym not in ("general", "symmetric"):
            raise MatrixMarketError(f"{path}: unsupported symmetry '{sym}'")
        line = fh.readline()
        while line and line.lstrip().startswith("%"):
            line = fh.readline()
        try:
            nrows, ncols, nnz = (int(t) for t in line.split())
        except ValueError:
            raise MatrixMarketError(f"{path}: malformed size line") from None
        body = fh.read().split()
    if len(body) != 3 * nnz:
        raise MatrixMarketError(f"{path}: expected {nnz} entries")
    data = np.array(body, dtype=object).reshape(nnz, 3) if nnz else np.empty((0, 3))
    rows = data[:, 0].astype(np.int64) - 1
    cols = data[:, 1].astype(np.int64) - 1
    vals = data[:, 2].astype(np.float64)
    if nnz and (rows.min() < 0 or cols.min() < 0 or rows.max() >= nrows or cols.max() >= ncols):
        raise MatrixMarketError(f"{path}: index out of bounds")
    if sym == "symmetric":
        if nrows != ncols:
            raise MatrixMarketError(f"{path}: symmetric matrix must be square")
        if np.any(cols > rows):
            raise MatrixMarketError(f"{path}: symmetric file stores upper-triangle entries")
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
    key = rows * max(ncols, 1) + cols
    if len(np.unique(key)) != len(key):
        raise MatrixMarketError(f"{path}: duplicate entries")
    coo = sps.coo_matrix((vals, (rows, cols)), shape=(nrows, ncols))
    return CsrMatrix.from_scipy(coo.tocsr())


def write_matrix_market(m: CsrMatrix, path, comment: str | None = None) -> None:
    """Write ``m`` as a general real coordinate file with full-precision values."""
    if isinstance(m, BlockDiagMatrix):
        m = m.assemble()
    sp = m.to_scipy().tocoo()
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        if comment:
            for ln in comment.splitlines():
                fh.write(f"% {ln}\n")
        fh.write(f"{m.nrows} {m.ncols} {m.nnz}\n")
        for i, j, v in zip(sp.row, sp.col, sp.data):
            fh.write(f"{i + 1} {j + 1} {float(v)!r}\n")


def read_block_structure(path, dimension: int | None = None) -> np.ndarray:
    """Read a block-size sidecar: one positive integer per line."""
    sizes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                v = int(s)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not an integer: {s!r}") from None
            if v <= 0:
                raise ValueError(f"{path}:{lineno}: block size must be positive")
            sizes.append(v)
    sizes = np.array(sizes, dtype=np.int64)
    if dimension is not None and int(sizes.sum()) != dimension:
        raise ValueError(f"{path}: block sizes sum to {int(sizes.sum())}, matrix has {dimension}")
    return sizes


def write_block_structure(sizes, path) -> None:
    with open(path, "w") as fh:
        for s in sizes:
            fh.write(f"{int(s)}\n")
