"""Sparse and dense matrix kernels.

Compressed-row sparse storage with matvec, dense Cholesky with log
determinant (LAPACK dpotrf behind the package's own error contract and an
instrumentation counter), the rank-two Woodbury leave-one-out inverse
update, and a dense conditional-Gaussian oracle.

By design the package factorises only where the likelihood or sampling
needs it; leave-one-out scoring paths never call `cholesky` for the direct
model, which `factorization_count` makes assertable from tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf, dpotrs
from threadpoolctl import threadpool_limits

from .scoring import GaussPredictive

_factorizations = 0


def factorization_count() -> int:
    """Number of dense Cholesky factorizations performed so far."""
    return _factorizations


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky pivot fails; carries the 0-based pivot index."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (pivot {pivot})")


class DegenerateLeaveOneOutError(ValueError):
    pass


@dataclass
class SparseMatrix:
    """Square-or-rectangular sparse matrix in compressed row storage.

    Column indices are strictly increasing within each row and the row
    offsets are monotone; both are checked on construction. Symmetric
    matrices store both triangles (matvec speed dominates the LOOS cost)
    and are verified to be exactly symmetric when flagged.
    """

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    symmetric: bool = False
    _csr: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.data = np.asarray(self.data, dtype=float)
        if self.indptr.shape != (self.n_rows + 1,) or self.indptr[0] != 0:
            raise ValueError("malformed row offsets")
        if np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != self.indices.size:
            raise ValueError("row offsets must be monotone and end at nnz")
        if self.indices.size != self.data.size:
            raise ValueError("indices and values length mismatch")
        if self.indices.size and (
            self.indices.min() < 0 or self.indices.max() >= self.n_cols
        ):
            raise ValueError("column index out of range")
        # strictly increasing columns within each row
        d = np.diff(self.indices)
        nnz = self.indices.size
        row_starts = self.indptr[1:-1]
        row_starts = row_starts[(row_starts > 0) & (row_starts < nnz)]
        interior = np.ones(d.size, dtype=bool)
        interior[row_starts - 1] = False  # boundaries between rows
        if np.any(d[interior] <= 0):
            raise ValueError("column indices must be strictly increasing within a row")
        self._csr = sp.csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.n_rows, self.n_cols)
        )
        if self.symmetric:
            if self.n_rows != self.n_cols:
                raise ValueError("symmetric flag on a non-square matrix")
            diff = self._csr - self._csr.T
            if diff.nnz and np.max(np.abs(diff.data)) != 0.0:
                raise ValueError("matrix flagged symmetric is not")

    @classmethod
    def from_scipy(cls, m, symmetric: bool = False) -> "SparseMatrix":
        csr = sp.csr_matrix(m)
        csr.sort_indices()
        csr.sum_duplicates()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data, symmetric)

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()


def spmv(m: SparseMatrix, x) -> np.ndarray:
    """Sparse matrix times vector (or stacked vectors, one per column)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != m.n_cols:
        raise ValueError(f"dimension mismatch: matrix is {m.n_rows}x{m.n_cols}, vector has {x.shape[0]}")
    return m.to_scipy() @ x


@dataclass
class CholeskyFactor:
    """Lower-triangular factor L with M = L L^T and log det M = 2*sum(log diag L)."""

    L: np.ndarray
    log_det: float

    def solve(self, b) -> np.ndarray:
        """Solve M x = b using the factor."""
        x, info = dpotrs(self.L, np.asarray(b, dtype=float), lower=1)
        if info != 0:
            raise np.linalg.LinAlgError("dpotrs failed")
        return x

    def solve_lower(self, b) -> np.ndarray:
        return solve_triangular(self.L, b, lower=True, check_finite=False)

    def solve_lower_t(self, b) -> np.ndarray:
        return solve_triangular(self.L, b, lower=True, trans="T", check_finite=False)


def cholesky(m: np.ndarray, overwrite: bool = False) -> CholeskyFactor:
    """Dense Cholesky of a symmetric positive definite matrix.

    With `overwrite=True` the factor is formed in place (the caller's array
    is destroyed); used for the largest benchmark sizes where an extra n x n
    copy would not fit in memory.
    """
    global _factorizations
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("cholesky needs a square matrix")
    if overwrite and m.flags.c_contiguous and not m.flags.f_contiguous:
        # the transpose view is Fortran-ordered and represents the same
        # (symmetric) matrix, so LAPACK can truly factor in place
        m = m.T
    # scipy's bundled OpenBLAS segfaults in multithreaded dpotrf for
    # n >~ 8000 (and its single-threaded kernel is faster here anyway)
    with threadpool_limits(limits=1, user_api="blas"):
        c, info = dpotrf(m, lower=1, clean=1, overwrite_a=1 if overwrite else 0)
    if info > 0:
        raise NotPositiveDefiniteError(pivot=info - 1)
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    _factorizations += 1
    log_det = 2.0 * float(np.sum(np.log(np.diag(c))))
    return CholeskyFactor(L=c, log_det=log_det)


def loo_inverse_update(sigma_inv: np.ndarray, sigma: np.ndarray, i: int) -> np.ndarray:
    """Inverse of sigma with row/column i removed, via a rank-two update.

    Writing U = [e_i f_i] and V = [f_i e_i]^T with f_i the i-th column of
    sigma zeroed at entry i, sigma - U V equals sigma with row and column i
    replaced by sigma_ii e_i, so the Woodbury identity

        (sigma - U V)^{-1} = sigma^{-1} + sigma^{-1} U (I - V sigma^{-1} U)^{-1} V sigma^{-1}

    needs only a 2x2 inverse; dropping row/column i of the result gives the
    submatrix inverse.
    """
    n = sigma.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"index {i} out of range for size {n}")
    f = sigma[:, i].copy()
    f[i] = 0.0
    e = np.zeros(n)
    e[i] = 1.0
    u = np.column_stack([e, f])
    v = np.vstack([f, e])
    siu = sigma_inv @ u
    cap = np.eye(2) - v @ siu
    det = cap[0, 0] * cap[1, 1] - cap[0, 1] * cap[1, 0]
    if abs(det) < 1e-14 * max(1.0, abs(cap[0, 0]) * abs(cap[1, 1])):
        raise DegenerateLeaveOneOutError(f"degenerate leave-one-out at index {i}")
    updated = sigma_inv + siu @ np.linalg.solve(cap, v @ sigma_inv)
    keep = np.arange(n) != i
    return updated[np.ix_(keep, keep)]


def conditional_gauss_dense(mu, sigma: np.ndarray, y, i: int) -> GaussPredictive:
    """Exact conditional of component i given the rest, from a dense covariance.

    Brute-force oracle for every leave-one-out conditional in the package:
    mean = mu_i + sigma_{i,-i} sigma_{-i,-i}^{-1} (y_{-i} - mu_{-i}) and the
    matching conditional variance.
    """
    mu = np.asarray(mu, dtype=float)
    y = np.asarray(y, dtype=float)
    n = sigma.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"index {i} out of range for size {n}")
    keep = np.arange(n) != i
    s_rest = sigma[np.ix_(keep, keep)]
    s_cross = sigma[i, keep]
    w = np.linalg.solve(s_rest, y[keep] - mu[keep])
    mean = mu[i] + s_cross @ w
    var = sigma[i, i] - s_cross @ np.linalg.solve(s_rest, s_cross)
    return GaussPredictive(float(mean), float(np.sqrt(var)))


def save_sparse_txt(path, m: SparseMatrix) -> None:
    """Plain-text triplet export: header 'rows cols nnz', then 'i j value' (0-based)."""
    coo = m.to_scipy().tocoo()
    with open(path, "w") as fh:
        fh.write(f"{m.n_rows} {m.n_cols} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {float(v)!r}\n")


def load_sparse_txt(path, symmetric: bool = False) -> SparseMatrix:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError("malformed header, expected 'rows cols nnz'")
        rows, cols, nnz = (int(t) for t in header)
        ii = np.empty(nnz, dtype=np.int64)
        jj = np.empty(nnz, dtype=np.int64)
        vv = np.empty(nnz, dtype=float)
        for k in range(nnz):
            parts = fh.readline().split()
            if len(parts) != 3:
                raise ValueError(f"malformed triplet on line {k + 2}")
            ii[k], jj[k], vv[k] = int(parts[0]), int(parts[1]), float(parts[2])
    coo = sp.coo_matrix((vv, (ii, jj)), shape=(rows, cols))
    return SparseMatrix.from_scipy(coo, symmetric=symmetric)
