"""Exhaustive one-atom-per-block dictionary fitting.

For K sub-dictionaries every index tuple ``(j_1, ..., j_K)`` defines a
K-variable NNLS problem. For K <= 4 all tuples are scored at once: the
needed Gram entries are gathered by broadcasting and each of the ``2^K - 1``
candidate supports is solved by an unrolled Cholesky factorisation. The
few best-scoring tuples are then re-solved exactly with the active-set
solver, which also fixes the reported residual.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import itertools
import math

import numba
import numpy as np

from .errors import DimensionMismatch
from .linalg_nnls import NnlsOptions, nnls_solve

MAX_BATCHED_K = 4
_PIVOT_REL = 1e-12
# relative slack on squared residuals when shortlisting tuples for exact re-solve
_SHORTLIST_REL = 1e-9
_SHORTLIST_MAX = 64
_CHUNK_ELEMS = 1 << 18


@dataclass
class FingerprintFit:
    atom_indices: tuple
    weights: np.ndarray
    fractions: np.ndarray
    params: list
    residual_norm: float
    combos_evaluated: int
    degenerate: bool = False


def weights_to_fractions(w):
    """Normalise non-negative weights to volume fractions.

    Returns ``(fractions, degenerate)``; an all-zero ``w`` gives uniform
    fractions and ``degenerate=True``.
    """
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total > 0:
        return w / total, False
    return np.full(w.shape, 1.0 / w.size), True


def _on_axes(a, axes, K):
    shape = [1] * K
    for ax, n in zip(axes, a.shape):
        shape[ax] = n
    return a.reshape(shape)


class _BlockProducts:
    """Gram entries of a dictionary split into blocks, laid out for broadcasting."""

    def __init__(self, D, y):
        K = D.K
        blocks = [s.atoms for s in D.subs]
        self.K = K
        self.yy = float(y @ y)
        self.b = [_on_axes(C.T @ y, (k,), K) for k, C in enumerate(blocks)]
        self.G = [[None] * K for _ in range(K)]
        for k in range(K):
            self.G[k][k] = _on_axes(np.einsum("ij,ij->j", blocks[k], blocks[k]), (k,), K)
            for l in range(k + 1, K):
                cross = _on_axes(blocks[k].T @ blocks[l], (k, l), K)
                self.G[k][l] = self.G[l][k] = cross

    def slice0(self, lo, hi):
        """View restricted to ``j_1`` in ``[lo, hi)``."""
        out = object.__new__(_BlockProducts)
        out.K, out.yy = self.K, self.yy
        out.b = [v[lo:hi] if k == 0 else v for k, v in enumerate(self.b)]
        out.G = [
            [v[lo:hi] if v.shape[0] > 1 else v for v in row]
            for row in self.G
        ]
        return out


def _best_squared_residuals(P, shape):
    """Minimum squared residual of every index tuple over all feasible supports."""
    K = P.K
    best = np.full(shape, P.yy)
    for size in range(1, K + 1):
        for S in itertools.combinations(range(K), size):
            L = {}
            ok = True
            for a, j in enumerate(S):
                s = P.G[j][j] - sum(L[a, p] ** 2 for p in range(a))
                ok = ok & (s > _PIVOT_REL * P.G[j][j])
                L[a, a] = np.sqrt(np.where(ok, s, 1.0))
                for c in range(a + 1, size):
                    i = S[c]
                    t = P.G[i][j] - sum(L[c, p] * L[a, p] for p in range(a))
                    L[c, a] = t / L[a, a]
            z = []
            for a, j in enumerate(S):
                z.append((P.b[j] - sum(L[a, p] * z[p] for p in range(a))) / L[a, a])
            res2 = P.yy - sum(zz * zz for zz in z)
            x = [None] * size
            feasible = ok
            for a in range(size - 1, -1, -1):
                x[a] = (z[a] - sum(L[p, a] * x[p] for p in range(a + 1, size))) / L[a, a]
                feasible = feasible & (x[a] >= 0)
            np.copyto(best, np.minimum(best, res2), where=np.broadcast_to(feasible, shape))
    return best


@numba.njit(cache=True, nogil=True)
def _pair_squared_residuals(g1, g2, g12, b1, b2, yy, out):
    """K = 2 specialisation of :func:`_best_squared_residuals` as a plain double loop."""
    for i in range(g12.shape[0]):
        for j in range(g12.shape[1]):
            best = yy
            if b1[i] >= 0.0:
                best = min(best, yy - b1[i] * b1[i] / g1[i])
            if b2[j] >= 0.0:
                best = min(best, yy - b2[j] * b2[j] / g2[j])
            s = g2[j] - g12[i, j] * g12[i, j] / g1[i]
            if s > _PIVOT_REL * g2[j]:
                l11 = np.sqrt(g1[i])
                l21 = g12[i, j] / l11
                l22 = np.sqrt(s)
                z1 = b1[i] / l11
                z2 = (b2[j] - l21 * z1) / l22
                x2 = z2 / l22
                x1 = (z1 - l21 * x2) / l11
                if x1 >= 0.0 and x2 >= 0.0:
                    best = min(best, yy - z1 * z1 - z2 * z2)
            out[i, j] = best


def _scores(P, shape):
    if P.K == 2:
        out = np.empty(shape)
        _pair_squared_residuals(P.G[0][0].ravel(), P.G[1][1].ravel(), np.ascontiguousarray(P.G[0][1]),
                                P.b[0].ravel(), P.b[1].ravel(), P.yy, out)
        return out
    return _best_squared_residuals(P, shape)


def _shortlist(P, sizes, lo, hi):
    shape = (hi - lo,) + tuple(sizes[1:])
    res2 = _scores(P.slice0(lo, hi), shape).ravel()
    floor = res2.min()
    cand = np.flatnonzero(res2 <= floor + _SHORTLIST_REL * P.yy)
    if cand.size > _SHORTLIST_MAX:
        cand = cand[np.argsort(res2[cand], kind="stable")[:_SHORTLIST_MAX]]
    tuples = np.stack(np.unravel_index(cand, shape), axis=1)
    tuples[:, 0] += lo
    return res2[cand], tuples


def _solve_tuple(D, y, tup, opts):
    cols = [D.column_offsets[k] + int(j) for k, j in enumerate(tup)]
    return nnls_solve(D.matrix[:, cols], y, opts)


def fit_exhaustive(y, D, opts=None, threads=1):
    """Best one-atom-per-block non-negative fit of ``y`` over every index tuple.

    Ties on the residual go to the lexicographically smallest tuple.
    ``threads > 1`` splits the first block into contiguous chunks that are
    scored concurrently; the reduction is order independent.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape != (D.M,):
        raise DimensionMismatch(f"signal of shape {y.shape} does not match M={D.M}")
    opts = opts or NnlsOptions()
    sizes = D.sizes
    combos = math.prod(sizes)

    if D.K > MAX_BATCHED_K:
        candidates = list(itertools.product(*(range(n) for n in sizes)))
    else:
        P = _BlockProducts(D, y)
        rest = combos // sizes[0]
        step = max(1, _CHUNK_ELEMS // rest)
        if threads > 1:
            step = min(step, max(1, math.ceil(sizes[0] / threads)))
        bounds = [(lo, min(lo + step, sizes[0])) for lo in range(0, sizes[0], step)]
        if threads > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(threads) as ex:
                parts = list(ex.map(lambda b: _shortlist(P, sizes, *b), bounds))
        else:
            parts = [_shortlist(P, sizes, *b) for b in bounds]
        res2 = np.concatenate([p[0] for p in parts])
        tuples = np.concatenate([p[1] for p in parts])
        keep = res2 <= res2.min() + _SHORTLIST_REL * P.yy
        candidates = sorted(tuple(int(v) for v in t) for t in tuples[keep])

    best = None
    for tup in candidates:
        sol = _solve_tuple(D, y, tup, opts)
        if best is None or sol.residual_norm < best[1].residual_norm:
            best = (tup, sol)
    tup, sol = best
    nu, degenerate = weights_to_fractions(sol.weights)
    params = []
    for k, j in enumerate(tup):
        sub = D.subs[k]
        r, f = sub.atom_params[j]
        params.append((sub.orientation, float(r), float(f)))
    return FingerprintFit(tup, sol.weights, nu, params, sol.residual_norm, combos, degenerate)
