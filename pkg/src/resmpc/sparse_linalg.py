"""Sparse storage, Ruiz equilibration and LDL^T of quasi-definite matrices.

Symmetric matrices are stored by their **upper triangle** (row <= col) in
compressed sparse column form. Factorization never pivots numerically; a
fill-reducing minimum-degree ordering is computed once per sparsity pattern
and reused whenever a matrix with the same pattern is refactored.
"""
from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels

INDEX = np.intp


class StructuralError(ValueError):
    """Malformed sparsity structure or a pattern mismatch."""


class SingularMatrixError(ArithmeticError):
    """Exactly-zero pivot encountered during LDL^T factorization."""

    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"zero pivot at column {column}")


@dataclass
class CscMatrix:
    nrows: int
    ncols: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return int(self.col_ptr[-1])

    def check(self):
        """Raise StructuralError unless the canonical CSC invariants hold."""
        cp, ri = self.col_ptr, self.row_idx
        if len(cp) != self.ncols + 1 or cp[0] != 0:
            raise StructuralError("col_ptr has wrong length or start")
        if np.any(np.diff(cp) < 0):
            raise StructuralError("col_ptr is decreasing")
        if cp[-1] != len(ri) or len(ri) != len(self.values):
            raise StructuralError("col_ptr end does not match nnz")
        if len(ri) and (ri.min() < 0 or ri.max() >= self.nrows):
            raise StructuralError("row index out of range")
        for j in range(self.ncols):
            seg = ri[cp[j]:cp[j + 1]]
            if len(seg) > 1 and np.any(np.diff(seg) <= 0):
                raise StructuralError(f"rows not strictly increasing in column {j}")
        return self

    def col_indices(self):
        return np.repeat(np.arange(self.ncols, dtype=INDEX), np.diff(self.col_ptr))

    def to_triplets(self):
        return self.row_idx.copy(), self.col_indices(), self.values.copy()

    def to_dense(self):
        out = np.zeros((self.nrows, self.ncols))
        np.add.at(out, (self.row_idx, self.col_indices()), self.values)
        return out

    def sym_to_dense(self):
        """Dense symmetric matrix from upper-triangle storage."""
        up = self.to_dense()
        return up + np.triu(up, 1).T

    def matvec(self, x):
        prod = self.values * x[self.col_indices()]
        return np.bincount(self.row_idx, weights=prod, minlength=self.nrows)

    def rmatvec(self, y):
        prod = self.values * y[self.row_idx]
        return np.bincount(self.col_indices(), weights=prod, minlength=self.ncols)

    def transpose(self):
        r, c, v = self.to_triplets()
        return csc_from_triplets(c, r, v, (self.ncols, self.nrows))

    def copy(self):
        return CscMatrix(self.nrows, self.ncols, self.col_ptr.copy(),
                         self.row_idx.copy(), self.values.copy())

    def same_pattern(self, other):
        return (self.shape == other.shape
                and np.array_equal(self.col_ptr, other.col_ptr)
                and np.array_equal(self.row_idx, other.row_idx))

    def pattern_key(self):
        h = hashlib.sha1()
        h.update(np.array(self.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.col_ptr, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.row_idx, dtype=np.int64).tobytes())
        return h.hexdigest()

    def to_scipy(self):
        import scipy.sparse as sp
        return sp.csc_matrix((self.values, self.row_idx, self.col_ptr),
                             shape=self.shape)


def csc_from_triplets(rows, cols, vals, shape):
    """Canonical CSC from coordinate triplets; duplicates are summed.

    Explicit zeros are kept so the pattern depends only on the indices.
    """
    rows = np.asarray(rows, dtype=INDEX).ravel()
    cols = np.asarray(cols, dtype=INDEX).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    nr, nc = int(shape[0]), int(shape[1])
    if not (len(rows) == len(cols) == len(vals)):
        raise StructuralError("triplet arrays differ in length")
    if len(rows) and (rows.min() < 0 or rows.max() >= nr
                      or cols.min() < 0 or cols.max() >= nc):
        raise StructuralError("triplet index outside matrix shape")
    order = np.lexsort((rows, cols))
    r, c, v = rows[order], cols[order], vals[order]
    if len(r):
        first = np.ones(len(r), dtype=bool)
        first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        starts = np.flatnonzero(first)
        v = np.add.reduceat(v, starts)
        r, c = r[starts], c[starts]
    col_ptr = np.zeros(nc + 1, dtype=INDEX)
    np.add.at(col_ptr, c + 1, 1)
    np.cumsum(col_ptr, out=col_ptr)
    return CscMatrix(nr, nc, col_ptr, r.astype(INDEX), v.astype(float))


class TripletAssembler:
    """Reusable triplet-to-CSC map for a fixed index pattern.

    The sort and duplicate merge are computed once; ``assemble`` then only
    gathers and sums values.
    """

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=INDEX)
        cols = np.asarray(cols, dtype=INDEX)
        probe = csc_from_triplets(rows, cols, np.zeros(len(rows)), shape)
        self.template = probe
        order = np.lexsort((rows, cols))
        r, c = rows[order], cols[order]
        first = np.ones(len(r), dtype=bool)
        if len(r):
            first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        self.order = order
        self.starts = np.flatnonzero(first)
        self.merge = len(self.starts) != len(r)

    def assemble(self, vals):
        v = np.asarray(vals, dtype=float)[self.order]
        if self.merge:
            v = np.add.reduceat(v, self.starts)
        t = self.template
        return CscMatrix(t.nrows, t.ncols, t.col_ptr, t.row_idx, v)


def dense_to_csc(a, upper=False, keep_zeros=False):
    a = np.asarray(a, dtype=float)
    if upper:
        a = np.triu(a)
    if keep_zeros:
        mask = np.ones_like(a, dtype=bool)
        if upper:
            mask = np.triu(mask)
    else:
        mask = a != 0.0
    r, c = np.nonzero(mask)
    return csc_from_triplets(r, c, a[r, c], a.shape)


def upper_triangle(a: CscMatrix):
    """Keep entries with row <= col."""
    r, c, v = a.to_triplets()
    keep = r <= c
    return csc_from_triplets(r[keep], c[keep], v[keep], a.shape)


# ---------------------------------------------------------------------------
# Ruiz equilibration
# ---------------------------------------------------------------------------

RUIZ_MIN = 1e-4
RUIZ_MAX = 1e4


@dataclass
class RuizScaling:
    row_scale: np.ndarray
    col_scale: np.ndarray
    cost_scale: float = 1.0


def sym_col_norms(a: CscMatrix, out=None):
    if out is None:
        out = np.empty(a.ncols)
    kernels.sym_col_inf_norms(a.ncols, a.col_ptr, a.row_idx, a.values, out)
    return out


def ruiz_equilibrate(a_k: CscMatrix, b_k=None, max_iters=10):
    """Symmetric Ruiz scaling S A S of an upper-stored symmetric matrix.

    Each pass divides every row/column by the square root of its infinity
    norm. Structurally zero rows keep a unit scale.
    """
    if a_k.nrows != a_k.ncols:
        raise StructuralError("Ruiz equilibration needs a square matrix")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    n = a_k.ncols
    scaled = a_k.copy()
    d = np.ones(n)
    norms = np.empty(n)
    for _ in range(max_iters):
        kernels.sym_col_inf_norms(n, scaled.col_ptr, scaled.row_idx,
                                  scaled.values, norms)
        step = np.ones(n)
        nz = norms > 0.0
        step[nz] = 1.0 / np.sqrt(norms[nz])
        np.clip(step, RUIZ_MIN, RUIZ_MAX, out=step)
        kernels.sym_scale(n, scaled.col_ptr, scaled.row_idx, scaled.values, step)
        d *= step
    b_scaled = None if b_k is None else d * np.asarray(b_k, dtype=float)
    return scaled, b_scaled, RuizScaling(d, d.copy(), 1.0)


# ---------------------------------------------------------------------------
# Ordering and LDL^T
# ---------------------------------------------------------------------------


def minimum_degree_order(a: CscMatrix):
    """Deterministic minimum-degree elimination order (ties by index)."""
    n = a.ncols
    adj = [set() for _ in range(n)]
    for j in range(n):
        for i in a.row_idx[a.col_ptr[j]:a.col_ptr[j + 1]]:
            i = int(i)
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
    heap = [(len(adj[i]), i) for i in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        done[v] = True
        order.append(v)
        nb = adj[v]
        for u in nb:
            au = adj[u]
            au.discard(v)
            au.update(nb)
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return np.asarray(order, dtype=INDEX)


@dataclass
class LdlSymbolic:
    n: int
    perm: np.ndarray
    pinv: np.ndarray
    Cp: np.ndarray
    Ci: np.ndarray
    src: np.ndarray
    parent: np.ndarray
    Lnz: np.ndarray
    nnz_l: int
    pattern: CscMatrix = field(repr=False)

    def matches(self, a: CscMatrix):
        return self.pattern.same_pattern(a)


_SYMBOLIC_CACHE: dict = {}


def symbolic_analysis(a: CscMatrix, ordering="amd"):
    """Ordering, permuted pattern and elimination tree for an upper pattern."""
    if a.nrows != a.ncols:
        raise StructuralError("LDL factorization needs a square matrix")
    key = (a.pattern_key(), ordering)
    cached = _SYMBOLIC_CACHE.get(key)
    if cached is not None:
        return cached
    n = a.ncols
    r, c, _ = a.to_triplets()
    if np.any(r > c):
        raise StructuralError("expected upper-triangle storage (row <= col)")
    diag = np.zeros(n, dtype=bool)
    diag[r[r == c]] = True
    if not diag.all():
        missing = int(np.flatnonzero(~diag)[0])
        raise StructuralError(f"structurally missing diagonal at column {missing}")
    if ordering == "amd":
        perm = minimum_degree_order(a)
    elif ordering == "natural":
        perm = np.arange(n, dtype=INDEX)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    pinv = np.empty(n, dtype=INDEX)
    pinv[perm] = np.arange(n, dtype=INDEX)
    pr, pc = pinv[r], pinv[c]
    rr, cc = np.minimum(pr, pc), np.maximum(pr, pc)
    src = np.lexsort((rr, cc)).astype(INDEX)
    Ci = rr[src].astype(INDEX)
    Cp = np.zeros(n + 1, dtype=INDEX)
    np.add.at(Cp, cc + 1, 1)
    np.cumsum(Cp, out=Cp)
    parent = np.empty(n, dtype=INDEX)
    Lnz = np.empty(n, dtype=INDEX)
    work = np.empty(n, dtype=INDEX)
    total = kernels.ldl_etree(n, Cp, Ci, work, Lnz, parent)
    if total < 0:
        raise StructuralError("permuted pattern is not upper triangular")
    pattern = CscMatrix(n, n, a.col_ptr.copy(), a.row_idx.copy(),
                        np.zeros(0))
    sym = LdlSymbolic(n, perm, pinv, Cp, Ci, src, parent, Lnz, int(total), pattern)
    if len(_SYMBOLIC_CACHE) > 64:
        _SYMBOLIC_CACHE.clear()
    _SYMBOLIC_CACHE[key] = sym
    return sym


@dataclass(frozen=True)
class LdlFactors:
    """P A P^T = L diag(D) L^T with unit lower-triangular L (diagonal implicit)."""

    L: CscMatrix
    D: np.ndarray
    Dinv: np.ndarray
    perm: np.ndarray
    symbolic: LdlSymbolic = field(repr=False)

    @property
    def n(self):
        return self.symbolic.n

    def inertia(self):
        return int(np.sum(self.D > 0)), int(np.sum(self.D < 0))


def ldl_factorize(a: CscMatrix, symbolic: LdlSymbolic | None = None,
                  ordering="amd"):
    """Factor an upper-stored symmetric quasi-definite matrix.

    Pass ``symbolic`` from an earlier factorization to reuse its ordering;
    the pattern must then match exactly.
    """
    if symbolic is None:
        symbolic = symbolic_analysis(a, ordering)
    elif not symbolic.matches(a):
        raise StructuralError("sparsity pattern differs from the symbolic analysis")
    n = symbolic.n
    Cx = np.ascontiguousarray(a.values[symbolic.src])
    Lp = np.empty(n + 1, dtype=INDEX)
    Li = np.empty(symbolic.nnz_l, dtype=INDEX)
    Lx = np.empty(symbolic.nnz_l)
    D = np.empty(n)
    Dinv = np.empty(n)
    iwork = np.empty(4 * n, dtype=INDEX)
    fwork = np.empty(n)
    bad = kernels.ldl_factor(n, symbolic.Cp, symbolic.Ci, Cx, Lp, Li, Lx, D,
                             Dinv, symbolic.Lnz, symbolic.parent, iwork, fwork)
    if bad >= 0:
        raise SingularMatrixError(int(symbolic.perm[bad]))
    L = CscMatrix(n, n, Lp, Li, Lx)
    return LdlFactors(L, D, Dinv, symbolic.perm, symbolic)


def ldl_solve(factors: LdlFactors, b, out=None, work=None):
    """Solve A x = b with a factorization; pass ``out``/``work`` to avoid allocation."""
    n = factors.n
    b = np.asarray(b, dtype=float)
    if b.shape != (n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({n},)")
    if out is None:
        out = np.empty(n)
    if work is None:
        work = np.empty(n)
    L = factors.L
    kernels.ldl_solve_perm(n, factors.perm, L.col_ptr, L.row_idx, L.values,
                           factors.Dinv, np.ascontiguousarray(b), out, work)
    return out


def reconstruct(factors: LdlFactors):
    """Dense L diag(D) L^T (in permuted order), for checking."""
    L = factors.L.to_dense() + np.eye(factors.n)
    return (L * factors.D) @ L.T


# ---------------------------------------------------------------------------
# Matrix Market IO
# ---------------------------------------------------------------------------


def write_matrix_market(path, a: CscMatrix, symmetric=False):
    import scipy.io
    scipy.io.mmwrite(path, a.to_scipy(), symmetry="symmetric" if symmetric else "general")


def read_matrix_market(path, upper=False):
    import scipy.io
    m = scipy.io.mmread(path).tocoo()
    r, c, v = m.row, m.col, m.data
    if upper:
        r, c = np.minimum(m.row, m.col), np.maximum(m.row, m.col)
        # symmetric files expand both triangles; keep one copy of each entry
        keep = m.row <= m.col
        r, c, v = r[keep], c[keep], v[keep]
    return csc_from_triplets(r, c, v, m.shape)
