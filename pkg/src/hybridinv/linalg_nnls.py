"""Non-negative least squares by the Lawson-Hanson active-set method.

Matrices are plain ``float64`` numpy arrays (row-major, finite). The active
set iteration runs in a numba kernel; inner equality-constrained solves use
a Cholesky factorization of the normal equations and drop back to a
column-pivoted Householder QR whenever the Gram matrix is numerically
singular. The final weights are always re-solved by QR on the support.
"""

from dataclasses import dataclass, field
import math

import numba
import numpy as np

from .errors import DimensionMismatch, MaxIterationsExceeded

# Cholesky pivot must keep this fraction of its diagonal entry.
_CHOL_REL_PIVOT = 1e-10
# Householder QR rank cut, relative to the largest pivot.
_QR_RANK_TOL = 1e-13


@dataclass(frozen=True)
class NnlsOptions:
    """Solver tolerances; ``None`` picks the scale-aware defaults."""

    zero_tolerance: float | None = None
    max_iterations: int | None = None

    def resolve(self, A):
        tol = self.zero_tolerance
        if tol is None:
            col_norm2 = float(np.max(np.einsum("ij,ij->j", A, A), initial=0.0))
            tol = 1e-12 * max(col_norm2, np.finfo(float).tiny)
        if tol <= 0:
            raise ValueError("zero_tolerance must be positive")
        n = A.shape[1]
        max_iter = 3 * n if self.max_iterations is None else int(self.max_iterations)
        if max_iter < n:
            raise ValueError("max_iterations must be at least the number of columns")
        return float(tol), max_iter


@dataclass
class NnlsSolution:
    weights: np.ndarray
    residual_norm: float
    iterations: int
    support: np.ndarray = field(repr=False)
    converged: bool = True


@dataclass(frozen=True)
class KktReport:
    max_dual_violation: float
    max_support_gradient: float
    passed: bool


def as_matrix(A):
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise DimensionMismatch(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix entries must be finite")
    return A


def _as_rhs(A, y):
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"rhs of shape {y.shape} does not match {A.shape[0]} rows")
    return y


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _cholesky_solve(G, b):
    k = G.shape[0]
    L = np.zeros((k, k))
    for j in range(k):
        s = G[j, j]
        for p in range(j):
            s -= L[j, p] * L[j, p]
        if not s > _CHOL_REL_PIVOT * G[j, j]:
            return np.zeros(k), False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, k):
            t = G[i, j]
            for p in range(j):
                t -= L[i, p] * L[j, p]
            L[i, j] = t / L[j, j]
    z = np.empty(k)
    for i in range(k):
        t = b[i]
        for p in range(i):
            t -= L[i, p] * z[p]
        z[i] = t / L[i, i]
    x = np.empty(k)
    for i in range(k - 1, -1, -1):
        t = z[i]
        for p in range(i + 1, k):
            t -= L[p, i] * x[p]
        x[i] = t / L[i, i]
    return x, True


@numba.njit(cache=True)
def qr_lstsq(A, y):
    """Minimum-residual solution of ``A x ~= y`` by column-pivoted Householder QR.

    Columns beyond the numerical rank get a zero coefficient.
    """
    m, k = A.shape
    R = A.copy()
    qy = y.copy()
    perm = np.arange(k)
    rank = 0
    first = 0.0
    for j in range(min(m, k)):
        best = -1.0
        p = j
        for c in range(j, k):
            s = 0.0
            for i in range(j, m):
                s += R[i, c] * R[i, c]
            if s > best:
                best = s
                p = c
        if p != j:
            for i in range(m):
                tmp = R[i, j]
                R[i, j] = R[i, p]
                R[i, p] = tmp
            tp = perm[j]
            perm[j] = perm[p]
            perm[p] = tp
        nrm = math.sqrt(best)
        if j == 0:
            first = nrm
        if nrm <= _QR_RANK_TOL * first or nrm == 0.0:
            break
        alpha = -nrm if R[j, j] >= 0.0 else nrm
        v = R[j:, j].copy()
        v[0] -= alpha
        vn = 0.0
        for i in range(v.shape[0]):
            vn += v[i] * v[i]
        if vn > 0.0:
            for c in range(j, k):
                d = 0.0
                for i in range(v.shape[0]):
                    d += v[i] * R[j + i, c]
                d = 2.0 * d / vn
                for i in range(v.shape[0]):
                    R[j + i, c] -= d * v[i]
            d = 0.0
            for i in range(v.shape[0]):
                d += v[i] * qy[j + i]
            d = 2.0 * d / vn
            for i in range(v.shape[0]):
                qy[j + i] -= d * v[i]
        rank += 1
    z = np.zeros(k)
    for i in range(rank - 1, -1, -1):
        t = qy[i]
        for c in range(i + 1, rank):
            t -= R[i, c] * z[c]
        z[i] = t / R[i, i]
    x = np.zeros(k)
    for i in range(rank):
        x[perm[i]] = z[i]
    return x


@numba.njit(cache=True)
def _passive_solve(A, idx, y):
    As = np.ascontiguousarray(A[:, idx])
    G = As.T @ As
    b = As.T @ y
    x, ok = _cholesky_solve(G, b)
    if ok:
        return x
    return qr_lstsq(As, y)


@numba.njit(cache=True)
def _lawson_hanson(A, y, tol, max_iter):
    m, n = A.shape
    w = np.zeros(n)
    passive = np.zeros(n, dtype=np.bool_)
    rejected = np.zeros(n, dtype=np.bool_)
    it = 0
    converged = True
    r = y.copy()
    g = A.T @ r
    while True:
        jmax = -1
        best = tol
        for j in range(n):
            # strict '>' keeps the lowest index on ties
            if not passive[j] and not rejected[j] and g[j] > best:
                best = g[j]
                jmax = j
        if jmax < 0:
            break
        if it >= max_iter:
            converged = False
            break
        passive[jmax] = True
        first_inner = True
        stop = False
        while True:
            it += 1
            idx = np.nonzero(passive)[0]
            z = _passive_solve(A, idx, y)
            if first_inner:
                first_inner = False
                pos = 0
                for q in range(idx.shape[0]):
                    if idx[q] == jmax:
                        pos = q
                if z[pos] <= 0.0:
                    # entering column would not move: roundoff, skip it
                    passive[jmax] = False
                    rejected[jmax] = True
                    break
            if np.all(z > 0.0):
                for q in range(idx.shape[0]):
                    w[idx[q]] = z[q]
                rejected[:] = False
                break
            alpha = np.inf
            amin = -1
            for q in range(idx.shape[0]):
                if z[q] <= 0.0:
                    wi = w[idx[q]]
                    a = wi / (wi - z[q])
                    if a < alpha:
                        alpha = a
                        amin = idx[q]
            for q in range(idx.shape[0]):
                i = idx[q]
                w[i] = w[i] + alpha * (z[q] - w[i])
            w[amin] = 0.0
            for q in range(idx.shape[0]):
                i = idx[q]
                if w[i] <= tol:
                    w[i] = 0.0
                    passive[i] = False
            if it >= max_iter:
                converged = False
                stop = True
                break
        if stop:
            break
        if not rejected[jmax]:
            r = y - A @ w
            g = A.T @ r
    return w, it, converged


# --------------------------------------------------------------------------


def polish_on_support(As, y):
    """Re-solve the unconstrained problem on support columns ``As``.

    Returns ``(weights, residual_norm)``; used by every caller that reports
    a final residual so that equal supports give bitwise-equal residuals.
    """
    z = qr_lstsq(As, y)
    return z, float(np.linalg.norm(y - As @ z))


def nnls_solve(A, y, opts=None, *, raise_on_cap=True):
    """Solve ``min ||y - A w||_2`` subject to ``w >= 0``.

    Parameters
    ----------
    A : array_like, shape (m, n)
    y : array_like, shape (m,)
    opts : NnlsOptions, optional
    raise_on_cap : bool
        If true (default) hitting ``max_iterations`` raises
        :class:`MaxIterationsExceeded` carrying the partial solution;
        otherwise the partial solution is returned with ``converged=False``.

    Returns
    -------
    NnlsSolution
    """
    A = as_matrix(A)
    y = _as_rhs(A, y)
    tol, max_iter = (opts or NnlsOptions()).resolve(A)
    w, iterations, converged = _lawson_hanson(A, y, tol, max_iter)
    support = np.flatnonzero(w > tol)
    w[w <= tol] = 0.0
    if support.size:
        As = A[:, support]
        z, res = polish_on_support(As, y)
        if np.all(z > 0.0):
            w[support] = z
        else:
            res = float(np.linalg.norm(y - As @ w[support]))
    else:
        res = float(np.linalg.norm(y))
    sol = NnlsSolution(w, res, int(iterations), support, bool(converged))
    if not converged and raise_on_cap:
        raise MaxIterationsExceeded(f"no convergence after {iterations} iterations", sol)
    return sol


def kkt_report(A, y, w, tol):
    """Check the NNLS optimality conditions at ``w``.

    With ``g = A.T @ (A w - y)``, the dual violation is ``max(0, -min g)``
    and the support gradient is ``max |g_j|`` over ``w_j > 0``.
    """
    A = as_matrix(A)
    y = _as_rhs(A, y)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (A.shape[1],):
        raise DimensionMismatch(f"weights of shape {w.shape} do not match {A.shape[1]} columns")
    g = A.T @ (A @ w - y)
    dual = max(0.0, float(-np.min(g)))
    on = w > 0
    supp = float(np.max(np.abs(g[on]))) if np.any(on) else 0.0
    primal = max(0.0, float(-np.min(w)))
    return KktReport(max(dual, primal), supp, max(dual, primal) <= tol and supp <= tol)


# --------------------------------------------------------------------------
# CSV layout: optional '#' comment lines, a "rows,cols" header, the two
# dimensions, then one line per matrix row. Vectors are stored as n x 1.


def write_matrix_csv(path, A):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    with open(path, "w") as fh:
        fh.write("# hybridinv-matrix v1\n")
        fh.write("rows,cols\n")
        fh.write(f"{A.shape[0]},{A.shape[1]}\n")
        for row in A:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != "rows,cols":
        raise ValueError(f"{path}: missing 'rows,cols' header")
    rows, cols = (int(v) for v in lines[1].split(","))
    values = [float(v) for ln in lines[2:] for v in ln.split(",")]
    if len(values) != rows * cols:
        raise DimensionMismatch(f"{path}: expected {rows * cols} values, found {len(values)}")
    return np.array(values).reshape(rows, cols)
