"""ADMM solver for convex QPs of the form

    minimize    ½ xᵀPx + qᵀx
    subject to  lo ≤ Ax ≤ hi

The KKT matrix [[P + σI, Aᵀ], [A, −ρ⁻¹I]] is factored once per solve and
the iteration runs for a fixed budget. Infinite bounds are written as the
±1e30 sentinel ``INF``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .sparse_linalg import (INDEX, CscMatrix, RuizScaling, StructuralError,
                            TripletAssembler, csc_from_triplets, ldl_factorize,
                            ruiz_equilibrate)

INF = 1e30


class DivergenceError(ArithmeticError):
    def __init__(self, iteration):
        self.iteration = iteration
        super().__init__(f"non-finite ADMM iterate at iteration {iteration}")


@dataclass
class QpProblem:
    """P is stored as its upper triangle."""

    P: CscMatrix
    q_lin: np.ndarray
    A: CscMatrix
    lo: np.ndarray
    hi: np.ndarray

    @property
    def n(self):
        return self.P.ncols

    @property
    def m(self):
        return self.A.nrows

    def validate(self):
        n, m = self.n, self.m
        if self.P.nrows != n or self.A.ncols != n:
            raise ValueError("P and A disagree on the number of variables")
        if self.q_lin.shape != (n,) or self.lo.shape != (m,) or self.hi.shape != (m,):
            raise ValueError("vector lengths do not match the matrices")
        if np.any(self.lo > self.hi):
            raise ValueError("lo > hi for some constraint")
        return self


@dataclass(frozen=True)
class AdmmSettings:
    sigma: float = 1e-6
    rho: float = 0.1
    # equality rows use rho * rho_eq_scale; unbounded rows use RHO_MIN
    rho_eq_scale: float = 1e3
    over_relax: float = 1.6
    n_iters: int = 25
    # Ruiz passes applied inside admm_solve; 0 solves the data as given
    scaling_iters: int = 0
    # tolerance exit, off unless eps_abs is set
    eps_abs: float | None = None
    eps_rel: float = 0.0
    check_every: int = 25

    def __post_init__(self):
        if self.sigma <= 0 or self.rho <= 0:
            raise ValueError("sigma and rho must be positive")
        if self.rho_eq_scale <= 0:
            raise ValueError("rho_eq_scale must be positive")
        if not 0.0 < self.over_relax < 2.0:
            raise ValueError("over_relax must lie in (0, 2)")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.scaling_iters < 0:
            raise ValueError("scaling_iters must be >= 0")


RHO_MIN = 1e-6


def rho_vector(lo, hi, settings: AdmmSettings):
    """Per-row penalty: stiff on equalities, nearly zero on unbounded rows."""
    rho = np.full(len(lo), settings.rho)
    rho[lo == hi] = settings.rho * settings.rho_eq_scale
    rho[(lo <= -INF) & (hi >= INF)] = RHO_MIN
    return rho


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z_con: np.ndarray
    prim_res: float
    dual_res: float
    objective: float
    iterations: int = 0


def qp_value(prob: QpProblem, x):
    """½xᵀPx + qᵀx with P given by its upper triangle."""
    P = prob.P
    r, c = P.row_idx, P.col_indices()
    w = np.where(r == c, 0.5, 1.0) * P.values
    return float(np.sum(w * x[r] * x[c]) + prob.q_lin @ x)


def sym_matvec(P: CscMatrix, x):
    """Product with the full symmetric matrix stored as an upper triangle."""
    r, c = P.row_idx, P.col_indices()
    off = r != c
    out = np.bincount(r, weights=P.values * x[c], minlength=P.nrows)
    out += np.bincount(c[off], weights=P.values[off] * x[r[off]], minlength=P.nrows)
    return out


# ---------------------------------------------------------------------------
# KKT assembly
# ---------------------------------------------------------------------------


class KktAssembler:
    """Fixed-pattern builder for [[P + σI, Aᵀ], [A, −ρ⁻¹I]] (upper triangle).

    The output pattern depends only on the patterns of P and A, so repeated
    assembly with new values reuses one index map.
    """

    def __init__(self, P: CscMatrix, A: CscMatrix):
        n, m = P.ncols, A.nrows
        if P.nrows != n or A.ncols != n:
            raise StructuralError("P must be n×n and A must be m×n")
        self.n, self.m = n, m
        self.P_pattern = (P.col_ptr.copy(), P.row_idx.copy())
        self.A_pattern = (A.col_ptr.copy(), A.row_idx.copy())
        diag = np.arange(n, dtype=INDEX)
        rows = np.concatenate([P.row_idx, diag, A.col_indices(), n + np.arange(m)])
        cols = np.concatenate([P.col_indices(), diag, n + A.row_idx, n + np.arange(m)])
        self._asm = TripletAssembler(rows, cols, (n + m, n + m))
        self._buf = np.empty(len(rows))
        self._np, self._na = P.nnz, A.nnz

    def _check(self, P, A):
        if not (np.array_equal(P.col_ptr, self.P_pattern[0])
                and np.array_equal(P.row_idx, self.P_pattern[1])
                and np.array_equal(A.col_ptr, self.A_pattern[0])
                and np.array_equal(A.row_idx, self.A_pattern[1])):
            raise StructuralError("P or A pattern changed")

    def assemble(self, P, A, sigma, rho_inv_diag):
        """``rho_inv_diag`` is the value placed on the lower-right diagonal."""
        self._check(P, A)
        b = self._buf
        a, c = self._np, self._np + self.n
        b[:a] = P.values
        b[a:c] = sigma
        b[c:c + self._na] = A.values
        b[c + self._na:] = rho_inv_diag
        return self._asm.assemble(b)


def assemble_kkt(P: CscMatrix, A: CscMatrix, sigma, rho):
    return KktAssembler(P, A).assemble(P, A, sigma, -1.0 / rho)


def kkt_rhs(x, z_con, y, q_lin, sigma, rho):
    x, z_con, y, q_lin = map(np.asarray, (x, z_con, y, q_lin))
    if x.shape != q_lin.shape or z_con.shape != y.shape:
        raise ValueError("inconsistent vector dimensions")
    return np.concatenate([sigma * x - q_lin, z_con - y / rho])


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


def scale_problem(prob: QpProblem, iters=10, kkt: KktAssembler | None = None):
    """Ruiz-equilibrate (P, A) through the data KKT matrix [[P, Aᵀ], [A, 0]].

    Returns the scaled problem and a RuizScaling with ``col_scale`` = D
    (variables), ``row_scale`` = E (constraints) and a cost scale c, so that
    the scaled data are cDPD, cDq, EAD, El, Eu.
    """
    n = prob.n
    kkt = kkt or KktAssembler(prob.P, prob.A)
    K0 = kkt.assemble(prob.P, prob.A, 0.0, 0.0)
    _, _, s = ruiz_equilibrate(K0, None, max_iters=iters)
    D, E = s.row_scale[:n], s.row_scale[n:]
    P, A = prob.P, prob.A
    Pv = P.values * D[P.row_idx] * D[P.col_indices()]
    Av = A.values * E[A.row_idx] * D[A.col_indices()]
    q = D * prob.q_lin
    Pn = np.zeros(n)
    np.maximum.at(Pn, P.row_idx, np.abs(Pv))
    np.maximum.at(Pn, P.col_indices(), np.abs(Pv))
    denom = max(Pn.mean() if n else 0.0, np.abs(q).max(initial=0.0))
    c = 1.0 if denom <= 0 else float(np.clip(1.0 / denom, 1e-4, 1e4))
    lo = np.where(prob.lo <= -INF, -INF, E * prob.lo)
    hi = np.where(prob.hi >= INF, INF, E * prob.hi)
    scaled = QpProblem(CscMatrix(n, n, P.col_ptr, P.row_idx, c * Pv), c * q,
                       CscMatrix(A.nrows, n, A.col_ptr, A.row_idx, Av), lo, hi)
    return scaled, RuizScaling(E, D, c)


def unscale_solution(sol: QpSolution, scaling: RuizScaling, prob: QpProblem):
    """Map a solution of the scaled problem back to the original one."""
    D, E, c = scaling.col_scale, scaling.row_scale, scaling.cost_scale
    x = D * sol.x
    y = E * sol.y / c
    z = sol.z_con / E
    return _finish(prob, x, z, y, sol.iterations)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def _residuals(prob, x, z, y):
    Ax = prob.A.matvec(x)
    prim = float(np.abs(Ax - z).max(initial=0.0))
    dual = float(np.abs(sym_matvec(prob.P, x) + prob.q_lin
                        + prob.A.rmatvec(y)).max(initial=0.0))
    return prim, dual, Ax


def _finish(prob, x, z, y, iters):
    prim, dual, _ = _residuals(prob, x, z, y)
    return QpSolution(x, y, z, prim, dual, qp_value(prob, x), iters)


class QpSolver:
    """One factorization, then ADMM iterations on owned buffers.

    ``kkt`` and ``symbolic`` may be passed in to reuse fixed-pattern work
    across successive problems.
    """

    def __init__(self, prob: QpProblem, settings: AdmmSettings = AdmmSettings(),
                 kkt: KktAssembler | None = None, symbolic=None):
        prob.validate()
        self.prob = prob
        self.settings = settings
        self.kkt = kkt or KktAssembler(prob.P, prob.A)
        n, m = prob.n, prob.m
        self._lo = np.ascontiguousarray(np.maximum(prob.lo, -INF))
        self._hi = np.ascontiguousarray(np.minimum(prob.hi, INF))
        self.rho = rho_vector(self._lo, self._hi, settings)
        K = self.kkt.assemble(prob.P, prob.A, settings.sigma, -1.0 / self.rho)
        self.factors = ldl_factorize(K, symbolic)
        self._q = np.ascontiguousarray(prob.q_lin, dtype=float)
        self.x = np.zeros(n)
        self.z = np.zeros(m)
        self.y = np.zeros(m)
        self._rhs = np.empty(n + m)
        self._sol = np.empty(n + m)
        self._work = np.empty(n + m)

    def warm_start(self, x=None, y=None, z=None):
        p = self.prob
        if x is not None:
            x = np.asarray(x, dtype=float)
            if x.shape != (p.n,):
                raise ValueError("warm-start x has the wrong dimension")
            self.x[:] = x
        if y is not None:
            y = np.asarray(y, dtype=float)
            if y.shape != (p.m,):
                raise ValueError("warm-start y has the wrong dimension")
            self.y[:] = y
        if z is None:
            z = np.clip(p.A.matvec(self.x), self._lo, self._hi)
        self.z[:] = z

    def iterate(self, n_iters, callback=None):
        """Run ``n_iters`` iterations; ``callback(it, x, z, y)`` forces one-at-a-time stepping."""
        s = self.settings
        f = self.factors
        L = f.L
        args = (f.perm, L.col_ptr, L.row_idx, L.values, f.Dinv, self._q,
                self._lo, self._hi, s.sigma, self.rho, s.over_relax,
                self.x, self.z, self.y, self._rhs, self._sol, self._work)
        n, m = self.prob.n, self.prob.m
        if callback is None:
            bad = kernels.admm_iterations(n, m, n_iters, *args)
            if bad >= 0:
                raise DivergenceError(bad)
            return
        for it in range(n_iters):
            if kernels.admm_iterations(n, m, 1, *args) >= 0:
                raise DivergenceError(it)
            callback(it, self.x, self.z, self.y)

    def solve(self, callback=None):
        s = self.settings
        done = 0
        if s.eps_abs is None:
            self.iterate(s.n_iters, callback)
            done = s.n_iters
        else:
            while done < s.n_iters:
                k = min(s.check_every, s.n_iters - done)
                self.iterate(k, callback)
                done += k
                if self._converged():
                    break
        return _finish(self.prob, self.x.copy(), self.z.copy(), self.y.copy(), done)

    def _converged(self):
        p, s = self.prob, self.settings
        prim, dual, Ax = _residuals(p, self.x, self.z, self.y)
        eps_p = s.eps_abs + s.eps_rel * max(np.abs(Ax).max(initial=0), np.abs(self.z).max(initial=0))
        eps_d = s.eps_abs + s.eps_rel * np.abs(p.q_lin).max(initial=0)
        return prim <= eps_p and dual <= eps_d


def admm_solve(prob: QpProblem, settings: AdmmSettings = AdmmSettings(), warm=None,
               callback=None):
    """Solve ``prob`` with a fixed ADMM budget.

    ``warm`` is an optional ``(x, y)`` pair; z starts at the projection of Ax.
    With ``settings.scaling_iters > 0`` the problem is equilibrated first and
    ``callback`` sees the scaled iterates.
    """
    prob.validate()
    if settings.scaling_iters == 0:
        solver = QpSolver(prob, settings)
        if warm is not None:
            solver.warm_start(*warm)
        return solver.solve(callback)
    scaled, sc = scale_problem(prob, settings.scaling_iters)
    solver = QpSolver(scaled, settings)
    if warm is not None:
        x, y = warm
        solver.warm_start(np.asarray(x) / sc.col_scale,
                          sc.cost_scale * np.asarray(y) / sc.row_scale)
    return unscale_solution(solver.solve(callback), sc, prob)


# ---------------------------------------------------------------------------
# Problem dump / load
# ---------------------------------------------------------------------------

_HEADER = "%resmpc-qp 1"


def _mm_text(mat: CscMatrix, symmetric):
    import scipy.io
    buf = io.BytesIO()
    scipy.io.mmwrite(buf, mat.to_scipy(), symmetry="symmetric" if symmetric else "general",
                     precision=17)
    return buf.getvalue().decode()


def _vec_text(v):
    return "\n".join(repr(float(t)) for t in v)


def dump_problem(path, prob: QpProblem):
    """Write P, A (Matrix Market blocks) and q, lo, hi (one value per line)."""
    parts = [_HEADER, f"n {prob.n} m {prob.m}"]
    for name, mat, sym in (("P", prob.P, False), ("A", prob.A, False)):
        parts += [f"@block {name}", _mm_text(mat, sym).rstrip()]
    for name, v in (("q", prob.q_lin), ("lo", prob.lo), ("hi", prob.hi)):
        parts += [f"@block {name}", _vec_text(v)]
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def load_problem(path):
    import scipy.io
    with open(path) as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != _HEADER:
        raise ValueError(f"{path}: not a QP dump")
    n, m = int(lines[1].split()[1]), int(lines[1].split()[3])
    blocks, name = {}, None
    for line in lines[2:]:
        if line.startswith("@block "):
            name = line.split()[1]
            blocks[name] = []
        elif name is not None:
            blocks[name].append(line)

    def mat(key, shape, upper):
        coo = scipy.io.mmread(io.StringIO("\n".join(blocks[key]) + "\n")).tocoo()
        r, c, v = coo.row, coo.col, coo.data
        if upper:
            keep = r <= c
            r, c, v = r[keep], c[keep], v[keep]
        return csc_from_triplets(r, c, v, shape)

    def vec(key, size):
        out = np.array([float(t) for t in blocks[key] if t.strip()])
        if out.shape != (size,):
            raise ValueError(f"block {key} has {len(out)} entries, expected {size}")
        return out

    return QpProblem(mat("P", (n, n), True), vec("q", n), mat("A", (m, n), False),
                     vec("lo", m), vec("hi", m)).validate()

