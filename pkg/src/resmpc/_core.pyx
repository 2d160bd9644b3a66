# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numerical kernels; see ``_pycore`` for the reference versions."""
from libc.math cimport sin, cos, fabs, isfinite
import numpy as np

ctypedef Py_ssize_t idx_t

cdef idx_t UNKNOWN = -1


cdef idx_t _etree(idx_t n, const idx_t[::1] Ap, const idx_t[::1] Ai,
                  idx_t[::1] work, idx_t[::1] Lnz, idx_t[::1] parent) noexcept nogil:
    cdef idx_t i, j, p, total = 0
    for i in range(n):
        work[i] = 0
        Lnz[i] = 0
        parent[i] = UNKNOWN
    for j in range(n):
        work[j] = j
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            if i > j:
                return -1
            while work[i] != j:
                if parent[i] == UNKNOWN:
                    parent[i] = j
                Lnz[i] += 1
                work[i] = j
                i = parent[i]
    for i in range(n):
        total += Lnz[i]
    return total


def ldl_etree(idx_t n, const idx_t[::1] Ap, const idx_t[::1] Ai,
              idx_t[::1] work, idx_t[::1] Lnz, idx_t[::1] parent):
    cdef idx_t r
    with nogil:
        r = _etree(n, Ap, Ai, work, Lnz, parent)
    return r


cdef idx_t _factor(idx_t n, const idx_t[::1] Ap, const idx_t[::1] Ai,
                   const double[::1] Ax, idx_t[::1] Lp, idx_t[::1] Li,
                   double[::1] Lx, double[::1] D, double[::1] Dinv,
                   const idx_t[::1] Lnz, const idx_t[::1] parent,
                   idx_t[::1] iwork, double[::1] yvals) noexcept nogil:
    cdef idx_t i, j, k, p, bidx, nxt, nnze, nnzy, c, tmp
    cdef double yc
    cdef idx_t* marker = &iwork[0]
    cdef idx_t* yidx = &iwork[n]
    cdef idx_t* elim = &iwork[2 * n]
    cdef idx_t* nextspace = &iwork[3 * n]
    Lp[0] = 0
    for i in range(n):
        Lp[i + 1] = Lp[i] + Lnz[i]
        marker[i] = 0
        yvals[i] = 0.0
        D[i] = 0.0
        nextspace[i] = Lp[i]
    for k in range(n):
        nnzy = 0
        for p in range(Ap[k], Ap[k + 1]):
            bidx = Ai[p]
            if bidx == k:
                D[k] = Ax[p]
                continue
            yvals[bidx] = Ax[p]
            nxt = bidx
            if marker[nxt] == 0:
                marker[nxt] = 1
                elim[0] = nxt
                nnze = 1
                nxt = parent[bidx]
                while nxt != UNKNOWN and nxt < k:
                    if marker[nxt] == 1:
                        break
                    marker[nxt] = 1
                    elim[nnze] = nxt
                    nnze += 1
                    nxt = parent[nxt]
                while nnze:
                    nnze -= 1
                    yidx[nnzy] = elim[nnze]
                    nnzy += 1
        i = nnzy - 1
        while i >= 0:
            c = yidx[i]
            tmp = nextspace[c]
            yc = yvals[c]
            for j in range(Lp[c], tmp):
                yvals[Li[j]] -= Lx[j] * yc
            Li[tmp] = k
            Lx[tmp] = yc * Dinv[c]
            D[k] -= yc * Lx[tmp]
            nextspace[c] = tmp + 1
            yvals[c] = 0.0
            marker[c] = 0
            i -= 1
        if D[k] == 0.0:
            return k
        Dinv[k] = 1.0 / D[k]
    return -1


def ldl_factor(idx_t n, const idx_t[::1] Ap, const idx_t[::1] Ai,
               const double[::1] Ax, idx_t[::1] Lp, idx_t[::1] Li,
               double[::1] Lx, double[::1] D, double[::1] Dinv,
               const idx_t[::1] Lnz, const idx_t[::1] parent,
               idx_t[::1] iwork, double[::1] fwork):
    cdef idx_t r
    with nogil:
        r = _factor(n, Ap, Ai, Ax, Lp, Li, Lx, D, Dinv, Lnz, parent, iwork, fwork)
    return r


cdef void _solve_perm(idx_t n, const idx_t[::1] perm, const idx_t[::1] Lp,
                      const idx_t[::1] Li, const double[::1] Lx,
                      const double[::1] Dinv, const double* b, double* x,
                      double* w) noexcept nogil:
    cdef idx_t i, j
    cdef double val
    for i in range(n):
        w[i] = b[perm[i]]
    for i in range(n):
        val = w[i]
        for j in range(Lp[i], Lp[i + 1]):
            w[Li[j]] -= Lx[j] * val
    for i in range(n):
        w[i] *= Dinv[i]
    i = n - 1
    while i >= 0:
        val = w[i]
        for j in range(Lp[i], Lp[i + 1]):
            val -= Lx[j] * w[Li[j]]
        w[i] = val
        i -= 1
    for i in range(n):
        x[perm[i]] = w[i]


def ldl_solve_perm(idx_t n, const idx_t[::1] perm, const idx_t[::1] Lp,
                   const idx_t[::1] Li, const double[::1] Lx,
                   const double[::1] Dinv, const double[::1] b,
                   double[::1] x, double[::1] work):
    with nogil:
        _solve_perm(n, perm, Lp, Li, Lx, Dinv, &b[0], &x[0], &work[0])


def sym_col_inf_norms(idx_t n, const idx_t[::1] Ap, const idx_t[::1] Ai,
                      const double[::1] Ax, double[::1] out):
    cdef idx_t i, j, p
    cdef double v
    with nogil:
        for j in range(n):
            out[j] = 0.0
        for j in range(n):
            for p in range(Ap[j], Ap[j + 1]):
                i = Ai[p]
                v = fabs(Ax[p])
                if v > out[j]:
                    out[j] = v
                if v > out[i]:
                    out[i] = v


def sym_scale(idx_t n, const idx_t[::1] Ap, const idx_t[::1] Ai,
              double[::1] Ax, const double[::1] d):
    cdef idx_t j, p
    with nogil:
        for j in range(n):
            for p in range(Ap[j], Ap[j + 1]):
                Ax[p] *= d[Ai[p]] * d[j]


def admm_iterations(idx_t n, idx_t m, idx_t n_iters, const idx_t[::1] perm,
                    const idx_t[::1] Lp, const idx_t[::1] Li,
                    const double[::1] Lx, const double[::1] Dinv,
                    const double[::1] q, const double[::1] lo,
                    const double[::1] hi, double sigma,
                    const double[::1] rho, double alpha, double[::1] x, double[::1] z,
                    double[::1] y, double[::1] rhs, double[::1] sol,
                    double[::1] work):
    cdef idx_t it, i, nk = n + m
    cdef double rho_inv, zt, zr, zn, bad
    cdef idx_t failed = -1
    with nogil:
        for it in range(n_iters):
            for i in range(n):
                rhs[i] = sigma * x[i] - q[i]
            for i in range(m):
                rhs[n + i] = z[i] - y[i] / rho[i]
            _solve_perm(nk, perm, Lp, Li, Lx, Dinv, &rhs[0], &sol[0], &work[0])
            bad = 0.0
            for i in range(n):
                x[i] = alpha * sol[i] + (1.0 - alpha) * x[i]
                bad += x[i] * 0.0
            for i in range(m):
                rho_inv = 1.0 / rho[i]
                zt = z[i] + rho_inv * (sol[n + i] - y[i])
                zr = alpha * zt + (1.0 - alpha) * z[i]
                zn = zr + rho_inv * y[i]
                if zn < lo[i]:
                    zn = lo[i]
                if zn > hi[i]:
                    zn = hi[i]
                y[i] = y[i] + rho[i] * (zr - zn)
                z[i] = zn
                bad += y[i] * 0.0
            if not isfinite(bad):
                failed = it
                break
    return failed


# ---------------------------------------------------------------------------
# Planar biped
# ---------------------------------------------------------------------------

cdef inline void _rotv(double phi, double vx, double vz, double* out) noexcept nogil:
    cdef double c = cos(phi), s = sin(phi)
    out[0] = c * vx - s * vz
    out[1] = s * vx + c * vz


cdef void _point_jac(const double* p, const double* v, idx_t npiv,
                     const idx_t* coords, const double* opos,
                     const double* ovel, double* J, double* Jd) noexcept nogil:
    # J, Jd are 2x9 row-major
    cdef idx_t k, j
    for k in range(18):
        J[k] = 0.0
        Jd[k] = 0.0
    J[0] = 1.0
    J[9 + 1] = 1.0
    for k in range(npiv):
        j = coords[k]
        J[j] = -(p[1] - opos[2 * k + 1])
        J[9 + j] = p[0] - opos[2 * k]
        Jd[j] = -(v[1] - ovel[2 * k + 1])
        Jd[9 + j] = v[0] - ovel[2 * k]


cdef void _point_vel(const double* J, const double* qd, double* v) noexcept nogil:
    cdef idx_t j
    v[0] = 0.0
    v[1] = 0.0
    for j in range(9):
        v[0] += J[j] * qd[j]
        v[1] += J[9 + j] * qd[j]


def biped_terms(const double[::1] geom, const double[::1] q,
                const double[::1] qd, double[:, ::1] M, double[::1] h,
                double[:, ::1] pc, double[:, ::1] vc, double[:, ::1] Jc,
                double[:, ::1] Jcdot, double[:, ::1] com):
    with nogil:
        _terms(geom, q, qd, M, h, pc, vc, Jc, Jcdot, com)


def biped_terms_batch(const double[::1] geom, const double[:, ::1] Q,
                      const double[:, ::1] V, double[:, :, ::1] M, double[:, ::1] h,
                      double[:, :, ::1] pc, double[:, :, ::1] vc, double[:, :, ::1] Jc,
                      double[:, :, ::1] Jcdot, double[:, :, ::1] com):
    cdef idx_t i
    with nogil:
        for i in range(Q.shape[0]):
            _terms(geom, Q[i], V[i], M[i], h[i], pc[i], vc[i], Jc[i], Jcdot[i], com[i])


def base_dynamics_fd(const double[::1] geom, const double[:, ::1] Q,
                     const double[:, ::1] V, const double[:, ::1] A,
                     const double[:, ::1] F, double eps,
                     double[:, ::1] resid, double[:, :, ::1] jac):
    """Base rows of M a + h − Jcᵀ F per node, plus forward differences in q[2:]."""
    cdef idx_t T = Q.shape[0], i, j, k, r
    cdef double[:, ::1] M = np.empty((9, 9))
    cdef double[::1] h = np.empty(9)
    cdef double[:, ::1] pc = np.empty((4, 2))
    cdef double[:, ::1] vc = np.empty((4, 2))
    cdef double[:, ::1] Jc = np.empty((8, 9))
    cdef double[:, ::1] Jd = np.empty((8, 9))
    cdef double[:, ::1] com = np.empty((7, 2))
    cdef double[::1] qp = np.empty(9)
    cdef double val
    with nogil:
        for i in range(T):
            for j in range(-1, 7):
                for k in range(9):
                    qp[k] = Q[i, k]
                if j >= 0:
                    qp[j + 2] += eps
                _terms(geom, qp, V[i], M, h, pc, vc, Jc, Jd, com)
                for r in range(3):
                    val = h[r]
                    for k in range(9):
                        val += M[r, k] * A[i, k]
                    for k in range(8):
                        val -= Jc[k, r] * F[i, k]
                    if j < 0:
                        resid[i, r] = val
                    else:
                        jac[i, r, j] = (val - resid[i, r]) / eps


cdef void _terms(const double[::1] geom, const double[::1] q,
                 const double[::1] qd, double[:, ::1] M, double[::1] h,
                 double[:, ::1] pc, double[:, ::1] vc, double[:, ::1] Jc,
                 double[:, ::1] Jcdot, double[:, ::1] com) noexcept nogil:
    cdef double lt = geom[0], lth = geom[1], lsh = geom[2], fh = geom[3]
    cdef double ah = geom[4], fcx = geom[5], fcz = geom[6], g = geom[15]
    cdef double masses[7]
    cdef double inert[7]
    cdef double base[2]
    cdef double vbase[2]
    cdef double knee[2]
    cdef double vknee[2]
    cdef double ankle[2]
    cdef double vankle[2]
    cdef double tmp[2]
    cdef double p[2]
    cdef double v[2]
    cdef double J[18]
    cdef double Jd[18]
    cdef double acc[2]
    cdef double opos[8]
    cdef double ovel[8]
    cdef idx_t coords[4]
    cdef idx_t rot[4]
    cdef idx_t nrot, npiv, side, level, a, b, c, i, j, hip_c, knee_c, ank_c
    cdef idx_t body, cidx, which
    cdef double th, phi_t, phi_s, phi_f, w_t, w_s, m_b, I_b, cx, cz
    cdef double qq[9]
    cdef double qv[9]

    masses[0] = geom[7]
    inert[0] = geom[11]
    for i in range(3):
        masses[1 + i] = geom[8 + i]
        masses[4 + i] = geom[8 + i]
        inert[1 + i] = geom[12 + i]
        inert[4 + i] = geom[12 + i]

    for i in range(9):
        qq[i] = q[i]
        qv[i] = qd[i]
        h[i] = 0.0
        for j in range(9):
            M[i, j] = 0.0
    base[0] = qq[0]
    base[1] = qq[1]
    vbase[0] = qv[0]
    vbase[1] = qv[1]
    th = qq[2]

    # torso
    _rotv(th, 0.0, 0.5 * lt, tmp)
    p[0] = base[0] + tmp[0]
    p[1] = base[1] + tmp[1]
    coords[0] = 2
    opos[0] = base[0]
    opos[1] = base[1]
    ovel[0] = vbase[0]
    ovel[1] = vbase[1]
    v[0] = 0.0
    v[1] = 0.0
    _point_jac(p, v, 1, coords, opos, ovel, J, Jd)
    _point_vel(J, qv, v)
    _point_jac(p, v, 1, coords, opos, ovel, J, Jd)
    rot[0] = 2
    nrot = 1
    _accumulate(M, h, J, Jd, qv, masses[0], inert[0], rot, nrot, g)
    com[0, 0] = p[0]
    com[0, 1] = p[1]

    for side in range(2):
        if side == 0:
            hip_c = 3
        else:
            hip_c = 6
        knee_c = hip_c + 1
        ank_c = hip_c + 2
        phi_t = th + qq[hip_c]
        phi_s = phi_t + qq[knee_c]
        phi_f = phi_s + qq[ank_c]
        w_t = qv[2] + qv[hip_c]
        w_s = w_t + qv[knee_c]
        _rotv(phi_t, 0.0, -lth, tmp)
        knee[0] = base[0] + tmp[0]
        knee[1] = base[1] + tmp[1]
        vknee[0] = vbase[0] - w_t * (knee[1] - base[1])
        vknee[1] = vbase[1] + w_t * (knee[0] - base[0])
        _rotv(phi_s, 0.0, -lsh, tmp)
        ankle[0] = knee[0] + tmp[0]
        ankle[1] = knee[1] + tmp[1]
        vankle[0] = vknee[0] - w_s * (ankle[1] - knee[1])
        vankle[1] = vknee[1] + w_s * (ankle[0] - knee[0])
        # pivot table: pitch@base, hip@base, knee@knee, ankle@ankle
        coords[0] = 2
        coords[1] = hip_c
        coords[2] = knee_c
        coords[3] = ank_c
        opos[0] = base[0]
        opos[1] = base[1]
        opos[2] = base[0]
        opos[3] = base[1]
        opos[4] = knee[0]
        opos[5] = knee[1]
        opos[6] = ankle[0]
        opos[7] = ankle[1]
        ovel[0] = vbase[0]
        ovel[1] = vbase[1]
        ovel[2] = vbase[0]
        ovel[3] = vbase[1]
        ovel[4] = vknee[0]
        ovel[5] = vknee[1]
        ovel[6] = vankle[0]
        ovel[7] = vankle[1]
        for level in range(3):
            if level == 0:
                _rotv(phi_t, 0.0, -0.5 * lth, tmp)
                p[0] = base[0] + tmp[0]
                p[1] = base[1] + tmp[1]
            elif level == 1:
                _rotv(phi_s, 0.0, -0.5 * lsh, tmp)
                p[0] = knee[0] + tmp[0]
                p[1] = knee[1] + tmp[1]
            else:
                _rotv(phi_f, fcx, -fcz, tmp)
                p[0] = ankle[0] + tmp[0]
                p[1] = ankle[1] + tmp[1]
            npiv = 2 + level
            v[0] = 0.0
            v[1] = 0.0
            _point_jac(p, v, npiv, coords, opos, ovel, J, Jd)
            _point_vel(J, qv, v)
            _point_jac(p, v, npiv, coords, opos, ovel, J, Jd)
            body = 1 + 3 * side + level
            _accumulate(M, h, J, Jd, qv, masses[body], inert[body],
                        coords, npiv, g)
            com[body, 0] = p[0]
            com[body, 1] = p[1]
        # contacts: right side -> 0,1 ; left side -> 2,3
        for which in range(2):
            if which == 0:
                _rotv(phi_f, fh, -ah, tmp)
            else:
                _rotv(phi_f, -fh, -ah, tmp)
            p[0] = ankle[0] + tmp[0]
            p[1] = ankle[1] + tmp[1]
            v[0] = 0.0
            v[1] = 0.0
            _point_jac(p, v, 4, coords, opos, ovel, J, Jd)
            _point_vel(J, qv, v)
            _point_jac(p, v, 4, coords, opos, ovel, J, Jd)
            if side == 1:
                cidx = which
            else:
                cidx = 2 + which
            pc[cidx, 0] = p[0]
            pc[cidx, 1] = p[1]
            vc[cidx, 0] = v[0]
            vc[cidx, 1] = v[1]
            for j in range(9):
                Jc[2 * cidx, j] = J[j]
                Jc[2 * cidx + 1, j] = J[9 + j]
                Jcdot[2 * cidx, j] = Jd[j]
                Jcdot[2 * cidx + 1, j] = Jd[9 + j]


cdef void _accumulate(double[:, ::1] M, double[::1] h, const double* J,
                      const double* Jd, const double* qv, double m,
                      double inertia, const idx_t* rot, idx_t nrot,
                      double g) noexcept nogil:
    cdef idx_t i, j
    cdef double ax = 0.0, az = 0.0
    for j in range(9):
        ax += Jd[j] * qv[j]
        az += Jd[9 + j] * qv[j]
    az += g
    for i in range(9):
        if J[i] == 0.0 and J[9 + i] == 0.0:
            continue
        h[i] += m * (J[i] * ax + J[9 + i] * az)
        for j in range(9):
            M[i, j] += m * (J[i] * J[j] + J[9 + i] * J[9 + j])
    for i in range(nrot):
        for j in range(nrot):
            M[rot[i], rot[j]] += inertia
