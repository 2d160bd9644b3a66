"""Pure-Python implementations of the numerical kernels.

Every function here has a twin with the same signature in the compiled
``_core`` extension. Arrays are preallocated by the caller and written in
place; index arrays are ``np.intp`` and value arrays ``np.float64``.
"""
import numpy as np

UNKNOWN = -1

# ---------------------------------------------------------------------------
# LDL^T (up-looking, elimination-tree driven; upper triangle input)
# ---------------------------------------------------------------------------


def ldl_etree(n, Ap, Ai, work, Lnz, parent):
    """Elimination tree and column counts of L.

    Returns the total number of nonzeros in L, or -1 if the input holds an
    entry below the diagonal.
    """
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
    return int(np.sum(Lnz[:n]))


def ldl_factor(n, Ap, Ai, Ax, Lp, Li, Lx, D, Dinv, Lnz, parent, iwork, fwork):
    """Numeric factorization into preallocated L, D buffers.

    ``iwork`` needs length 4n, ``fwork`` length n. Returns -1 on success or
    the column index of the first exactly-zero pivot.
    """
    marker = iwork[0:n]
    yidx = iwork[n:2 * n]
    elim = iwork[2 * n:3 * n]
    nextspace = iwork[3 * n:4 * n]
    yvals = fwork
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
        for i in range(nnzy - 1, -1, -1):
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
        if D[k] == 0.0:
            return k
        Dinv[k] = 1.0 / D[k]
    return -1


def ldl_solve_perm(n, perm, Lp, Li, Lx, Dinv, b, x, work):
    """Solve (P^T L D L^T P) x = b, i.e. x = P^T L^-T D^-1 L^-1 P b."""
    for k in range(n):
        work[k] = b[perm[k]]
    _solve_inplace(n, Lp, Li, Lx, Dinv, work)
    for k in range(n):
        x[perm[k]] = work[k]


def _solve_inplace(n, Lp, Li, Lx, Dinv, x):
    for i in range(n):
        lo, hi = Lp[i], Lp[i + 1]
        if hi > lo:
            x[Li[lo:hi]] -= Lx[lo:hi] * x[i]
    x[:n] *= Dinv[:n]
    for i in range(n - 1, -1, -1):
        lo, hi = Lp[i], Lp[i + 1]
        if hi > lo:
            x[i] -= np.dot(Lx[lo:hi], x[Li[lo:hi]])


# ---------------------------------------------------------------------------
# Symmetric scaling helpers (upper triangle CSC)
# ---------------------------------------------------------------------------


def sym_col_inf_norms(n, Ap, Ai, Ax, out):
    out[:n] = 0.0
    for j in range(n):
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            v = abs(Ax[p])
            if v > out[j]:
                out[j] = v
            if v > out[i]:
                out[i] = v


def sym_scale(n, Ap, Ai, Ax, d):
    for j in range(n):
        for p in range(Ap[j], Ap[j + 1]):
            Ax[p] *= d[Ai[p]] * d[j]


# ---------------------------------------------------------------------------
# ADMM inner loop
# ---------------------------------------------------------------------------


def admm_iterations(n, m, n_iters, perm, Lp, Li, Lx, Dinv, q, lo, hi,
                    sigma, rho, alpha, x, z, y, rhs, sol, work):
    """Run ``n_iters`` ADMM steps in place on (x, z, y); ``rho`` is per row.

    Returns -1, or the index of the first iteration producing a non-finite
    iterate.
    """
    rho_inv = 1.0 / rho
    nk = n + m
    for it in range(n_iters):
        rhs[:n] = sigma * x - q
        rhs[n:nk] = z - rho_inv * y
        ldl_solve_perm(nk, perm, Lp, Li, Lx, Dinv, rhs, sol, work)
        xt = sol[:n]
        zt = z + rho_inv * (sol[n:nk] - y)
        x[:] = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        znew = np.minimum(np.maximum(zr + rho_inv * y, lo), hi)
        y += rho * (zr - znew)
        z[:] = znew
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            return it
    return -1


# ---------------------------------------------------------------------------
# Planar biped kinematics and dynamics
# ---------------------------------------------------------------------------
# Geometry vector layout (see robot.ModelParams.geometry_vector):
#  0 l_torso  1 l_thigh  2 l_shank  3 foot_half  4 ankle_height
#  5 foot_com_x  6 foot_com_z
#  7 m_torso  8 m_thigh  9 m_shank  10 m_foot
#  11 I_torso  12 I_thigh  13 I_shank  14 I_foot  15 gravity
# Bodies: 0 torso, 1 L thigh, 2 L shank, 3 L foot, 4 R thigh, 5 R shank, 6 R foot
# Contacts: 0 R toe, 1 R heel, 2 L toe, 3 L heel

_LEG_COORDS = {0: (3, 4, 5), 1: (6, 7, 8)}  # left, right


def _perp(r):
    return np.array([-r[1], r[0]])


def _rot(phi, v):
    c, s = np.cos(phi), np.sin(phi)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def biped_terms(geom, q, qd, M, h, pc, vc, Jc, Jcdot, com):
    """Mass matrix, bias forces and contact kinematics.

    Writes M (9x9), h (9), contact positions/velocities pc, vc (4x2),
    contact Jacobian Jc (8x9), its time derivative Jcdot (8x9) and the
    body centre-of-mass positions com (7x2).
    """
    lt, lth, lsh, fh, ah, fcx, fcz = geom[0:7]
    masses = (geom[7], geom[8], geom[9], geom[10], geom[8], geom[9], geom[10])
    inert = (geom[11], geom[12], geom[13], geom[14], geom[12], geom[13], geom[14])
    g = geom[15]
    base = np.array([q[0], q[1]])
    vbase = np.array([qd[0], qd[1]])
    th = q[2]

    def point_jac(p, v, pivots):
        # pivots: list of (coord index, pivot pos, pivot vel)
        J = np.zeros((2, 9))
        Jd = np.zeros((2, 9))
        J[0, 0] = 1.0
        J[1, 1] = 1.0
        for j, o, vo in pivots:
            J[:, j] = _perp(p - o)
            Jd[:, j] = _perp(v - vo)
        return J, Jd

    M[:, :] = 0.0
    h[:] = 0.0
    bodies = []
    # torso
    pt = base + _rot(th, np.array([0.0, 0.5 * lt]))
    piv = [(2, base, vbase)]
    bodies.append((pt, piv, (2,)))
    leg_contacts = {}
    for side in (0, 1):
        hip_c, knee_c, ank_c = _LEG_COORDS[side]
        phi_t = th + q[hip_c]
        phi_s = phi_t + q[knee_c]
        phi_f = phi_s + q[ank_c]
        w_t = qd[2] + qd[hip_c]
        w_s = w_t + qd[knee_c]
        w_f = w_s + qd[ank_c]
        knee = base + _rot(phi_t, np.array([0.0, -lth]))
        vknee = vbase + w_t * _perp(knee - base)
        ankle = knee + _rot(phi_s, np.array([0.0, -lsh]))
        vankle = vknee + w_s * _perp(ankle - knee)
        piv_t = [(2, base, vbase), (hip_c, base, vbase)]
        piv_s = piv_t + [(knee_c, knee, vknee)]
        piv_f = piv_s + [(ank_c, ankle, vankle)]
        p_th = base + _rot(phi_t, np.array([0.0, -0.5 * lth]))
        p_sh = knee + _rot(phi_s, np.array([0.0, -0.5 * lsh]))
        p_ft = ankle + _rot(phi_f, np.array([fcx, -fcz]))
        bodies.append((p_th, piv_t, (2, hip_c)))
        bodies.append((p_sh, piv_s, (2, hip_c, knee_c)))
        bodies.append((p_ft, piv_f, (2, hip_c, knee_c, ank_c)))
        toe = ankle + _rot(phi_f, np.array([fh, -ah]))
        heel = ankle + _rot(phi_f, np.array([-fh, -ah]))
        leg_contacts[side] = [(toe, piv_f, w_f, ankle, vankle),
                              (heel, piv_f, w_f, ankle, vankle)]

    for b, (p, piv, rot_coords) in enumerate(bodies):
        # velocity of the body point from its Jacobian
        J, _ = point_jac(p, np.zeros(2), [(j, o, vo) for j, o, vo in piv])
        v = J @ qd
        J, Jd = point_jac(p, v, piv)
        m = masses[b]
        M += m * (J.T @ J)
        for a in rot_coords:
            for c in rot_coords:
                M[a, c] += inert[b]
        acc = Jd @ qd
        acc[1] += g
        h += m * (J.T @ acc)
        com[b, 0] = p[0]
        com[b, 1] = p[1]

    order = [(1, 0), (1, 1), (0, 0), (0, 1)]  # R toe, R heel, L toe, L heel
    for c, (side, which) in enumerate(order):
        p, piv, _, _, _ = leg_contacts[side][which]
        J, _ = point_jac(p, np.zeros(2), piv)
        v = J @ qd
        J, Jd = point_jac(p, v, piv)
        pc[c, :] = p
        vc[c, :] = v
        Jc[2 * c:2 * c + 2, :] = J
        Jcdot[2 * c:2 * c + 2, :] = Jd


def biped_terms_batch(geom, Q, V, M, h, pc, vc, Jc, Jcdot, com):
    for i in range(Q.shape[0]):
        biped_terms(geom, Q[i], V[i], M[i], h[i], pc[i], vc[i], Jc[i], Jcdot[i], com[i])


def base_dynamics_fd(geom, Q, V, A, F, eps, resid, jac):
    """Base rows of M a + h − Jcᵀ F per node, plus forward differences in q[2:]."""
    bufs = [np.empty(s) for s in ((9, 9), 9, (4, 2), (4, 2), (8, 9), (8, 9), (7, 2))]
    M, h, Jc = bufs[0], bufs[1], bufs[4]

    def rows(q, i):
        biped_terms(geom, q, V[i], *bufs)
        return M[:3] @ A[i] + h[:3] - Jc[:, :3].T @ F[i]

    for i in range(Q.shape[0]):
        resid[i] = rows(Q[i], i)
        for j in range(7):
            qp = Q[i].copy()
            qp[j + 2] += eps
            jac[i, :, j] = (rows(qp, i) - resid[i]) / eps
