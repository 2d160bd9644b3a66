"""Kinodynamic MPC for the planar biped, solved by one QP per control tick.

Each tick linearizes the trajectory problem about a nominal guess, solves
the resulting QP with a fixed number of ADMM iterations, adds the step to
the guess and extracts feedforward torques by inverse dynamics at the first
node.

Decision vector layout: node i occupies ``NZ = 26`` consecutive entries
(q 9, q̇ 9, F 8) starting at ``26 i``.

Constraint rows, in order:

1. initial state, 18 rows
2. position integration q_{i+1} = q_i + Δt_i q̇_{i+1}, 9 rows for i < T−1
3. base dynamics M_b (q̇_{i+1} − q̇_i)/Δt_i + h_b = J_bᵀ F_i, 3 rows for i < T−1
4. per node and contact (7 rows): friction ±Fx − μFz ≤ 0, Fx box, Fz box,
   contact velocity (x, z), contact height
5. per node: joint positions (6) and joint velocities (6)

Rows that do not apply at a node carry ±INF bounds, so the sparsity
pattern never changes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import robot as R
from ._backend import kernels
from .qp import INF, AdmmSettings, DivergenceError, KktAssembler, QpProblem, QpSolver, qp_value, scale_problem, unscale_solution
from .sparse_linalg import CscMatrix, SingularMatrixError, StructuralError, TripletAssembler

NQ, NV, NF = R.NQ, R.NQ, R.NF
NZ = NQ + NV + NF
ROWS_PER_CONTACT = 7
STAGES = ("init_guess", "param", "kkt_build", "ruiz", "factorize", "admm", "rnea")


# ---------------------------------------------------------------------------
# Settings, gait, command
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MpcSettings:
    horizon: int = 12
    dt: tuple = (0.05,) * 12
    w_base_x: float = 0.0
    w_height: float = 500.0
    w_pitch: float = 300.0
    w_joint_pos: float = 5.0
    w_vx: float = 100.0
    w_vz: float = 100.0
    w_pitch_rate: float = 50.0
    w_joint_vel: float = 0.1
    w_force: float = 1e-3
    gait_period: float = 0.8
    phase_switch: float = 0.5
    # right toe, right heel, left toe, left heel
    phase_offsets: tuple = (0.0, 0.0, 0.5, 0.5)
    swing_height: float = 0.075
    v_to: float = 0.2
    v_td: float = -0.3
    n_qp: int = 25
    mu: float | None = None
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    over_relax: float = 1.6
    scaling_iters: int = 10
    warm_start: bool = False
    # include ∂(M a + h − Jᵀ F)/∂q in the base-dynamics rows
    dyn_config_terms: bool = True

    def __post_init__(self):
        dt = self.dt
        if np.ndim(dt) == 0:
            dt = (float(dt),) * self.horizon
        dt = tuple(float(t) for t in dt)
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "phase_offsets", tuple(float(t) for t in self.phase_offsets))
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if len(dt) != self.horizon or min(dt) <= 0:
            raise ValueError("dt schedule must have one positive entry per node")
        if self.w_base_x != 0.0:
            raise ValueError("base x is not tracked; its weight must be 0")
        if min(self.weight_vector()) < 0:
            raise ValueError("weights must be nonnegative")
        if len(self.phase_offsets) != R.NC:
            raise ValueError("one phase offset per contact point")
        if self.gait_period <= 0 or self.n_qp < 1:
            raise ValueError("gait_period and n_qp must be positive")

    def weight_vector(self):
        qw = [self.w_base_x, self.w_height, self.w_pitch] + [self.w_joint_pos] * 6
        vw = [self.w_vx, self.w_vz, self.w_pitch_rate] + [self.w_joint_vel] * 6
        return np.array(qw + vw + [self.w_force] * NF)

    def admm(self):
        return AdmmSettings(sigma=self.sigma, rho=self.rho, rho_eq_scale=self.rho_eq_scale,
                            over_relax=self.over_relax, n_iters=self.n_qp)

    def gait(self, phase=0.0):
        return GaitState(phase, self.gait_period, self.phase_switch, self.phase_offsets)


@dataclass(frozen=True)
class GaitState:
    """Global phase plus per-contact offsets; stance iff (phase + offset) mod 1 < switch."""

    phase: float = 0.0
    period: float = 0.8
    switch: float = 0.5
    offsets: tuple = (0.0, 0.0, 0.5, 0.5)

    def contact_phases(self, ahead=0.0):
        # rounding keeps nodes that land exactly on the switch from flipping on FP noise
        ph = np.round(self.phase + ahead / self.period + np.asarray(self.offsets), 12)
        return np.mod(ph, 1.0)

    def stance(self, ahead=0.0):
        return self.contact_phases(ahead) < self.switch

    def horizon_flags(self, dts):
        """(T, 4) stance flags; node i sits Σ_{k<i} Δt_k ahead of now."""
        ahead = np.concatenate([[0.0], np.cumsum(dts)[:-1]])
        return np.array([self.stance(a) for a in ahead])

    def swing_time(self, ahead=0.0):
        """Normalized time into swing per contact (NaN for stance)."""
        ph = self.contact_phases(ahead)
        if self.switch >= 1.0:
            return np.full(np.shape(ph), np.nan)
        t = (ph - self.switch) / (1.0 - self.switch)
        return np.where(ph < self.switch, np.nan, t)

    @property
    def contact_flags(self):
        return self.stance()

    def advance(self, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        return replace(self, phase=float(np.mod(self.phase + dt / self.period, 1.0)))


def advance_phase(gait: GaitState, dt):
    return gait.advance(dt)


@dataclass(frozen=True)
class MpcCommand:
    c_h: float
    c_vx: float = 0.0
    c_wpitch: float = 0.0

    @classmethod
    def standing(cls, model: R.ModelParams, c_vx=0.0):
        return cls(R.nominal_height(model), c_vx, 0.0)


# ---------------------------------------------------------------------------
# Swing trajectory
# ---------------------------------------------------------------------------


def bezier_control_points(z_swing, v_to, v_td):
    p1 = v_to / 5.0
    p4 = -v_td / 5.0
    mid = (32.0 * z_swing - 5.0 * p1 - 5.0 * p4) / 20.0
    return np.array([0.0, p1, mid, mid, p4, 0.0])


_BINOM5 = np.array([1.0, 5.0, 10.0, 10.0, 5.0, 1.0])
_BINOM4 = np.array([1.0, 4.0, 6.0, 4.0, 1.0])


def bezier_swing(t_sw, z_swing, v_to, v_td):
    """Height and rate of the quintic swing curve at normalized time ``t_sw``.

    The rate is the derivative with respect to normalized swing time.
    """
    t = float(np.clip(t_sw, 0.0, 1.0))
    P = bezier_control_points(z_swing, v_to, v_td)
    k = np.arange(6)
    basis = _BINOM5 * t ** k * (1.0 - t) ** (5 - k)
    k4 = np.arange(5)
    dbasis = _BINOM4 * t ** k4 * (1.0 - t) ** (4 - k4)
    return float(basis @ P), float(5.0 * dbasis @ np.diff(P))


def bezier_heights(t_sw, z_swing, v_to, v_td):
    """Vectorized height of the swing curve."""
    t = np.clip(np.asarray(t_sw, dtype=float), 0.0, 1.0)[..., None]
    k = np.arange(6)
    basis = _BINOM5 * t ** k * (1.0 - t) ** (5 - k)
    return basis @ bezier_control_points(z_swing, v_to, v_td)


# ---------------------------------------------------------------------------
# Desired trajectory and initial guess
# ---------------------------------------------------------------------------


def desired_trajectory(state: R.RobotState, cmd: MpcCommand, gait: GaitState,
                       settings: MpcSettings, model: R.ModelParams, flags=None):
    """(T, 26) reference: height c_h, pitch 0, nominal joints, forward
    velocity c_vx, weight shared over active contacts."""
    T = settings.horizon
    dts = np.asarray(settings.dt)
    if flags is None:
        flags = gait.horizon_flags(dts)
    z = np.zeros((T, NZ))
    t_nodes = np.concatenate([[0.0], np.cumsum(dts)[:-1]])
    nominal = R.nominal_pose(model)
    z[:, 0] = state.q[0] + cmd.c_vx * t_nodes
    z[:, 1] = cmd.c_h
    z[:, 2] = 0.0
    z[:, 3:NQ] = nominal[3:]
    z[:, NQ] = cmd.c_vx
    z[:, NQ + 2] = cmd.c_wpitch
    active = flags.sum(axis=1)
    share = np.where(active > 0, model.weight / np.maximum(active, 1), 0.0)
    z[:, NQ + NV + 1::2] = flags * share[:, None]
    return z


def initial_guess(state: R.RobotState, model: R.ModelParams, flags):
    """Nominal pose at the current base x, zero velocity, weight-sharing forces."""
    T = len(flags)
    z = np.zeros((T, NZ))
    q = R.nominal_pose(model)
    q[0] = state.q[0]
    z[:, :NQ] = q
    active = flags.sum(axis=1)
    share = np.where(active > 0, model.weight / np.maximum(active, 1), 0.0)
    z[:, NQ + NV + 1::2] = flags * share[:, None]
    return z


def shifted_guess(prev_z, state):
    z = np.vstack([prev_z[1:], prev_z[-1:]])
    z[:, 0] += state.q[0] - z[0, 0]
    return z


# ---------------------------------------------------------------------------
# QP construction
# ---------------------------------------------------------------------------

# contact c -> generalized coordinates its position depends on
_CONTACT_COLS = [np.array([0, 1, 2, 6, 7, 8]), np.array([0, 1, 2, 6, 7, 8]),
                 np.array([0, 1, 2, 3, 4, 5]), np.array([0, 1, 2, 3, 4, 5])]
_CC = np.array(_CONTACT_COLS)


class QpLayout:
    """Fixed row/column pattern of the MPC QP for a given horizon."""

    def __init__(self, T):
        self.T = T
        self.n = T * NZ
        rows, cols = [], []
        r = 0

        def add(rr, cc):
            rows.append(np.asarray(rr, dtype=np.intp).ravel())
            cols.append(np.asarray(cc, dtype=np.intp).ravel())

        def qi(i):
            return NZ * i + np.arange(NQ)

        def vi(i):
            return NZ * i + NQ + np.arange(NV)

        def fi(i):
            return NZ * i + NQ + NV + np.arange(NF)

        self.row_init = r
        add(r + np.arange(NQ + NV), np.concatenate([qi(0), vi(0)]))
        r += NQ + NV

        self.row_integ = r
        for i in range(T - 1):
            rr = r + np.arange(NQ)
            add(rr, qi(i + 1))
            add(rr, qi(i))
            add(rr, vi(i + 1))
            r += NQ

        self.row_dyn = r
        for i in range(T - 1):
            rr = np.repeat(r + np.arange(3), NV)
            add(rr, np.tile(vi(i + 1), 3))
            add(rr, np.tile(vi(i), 3))
            add(np.repeat(r + np.arange(3), NF), np.tile(fi(i), 3))
            add(np.repeat(r + np.arange(3), NQ - 2), np.tile(qi(i)[2:], 3))
            r += 3

        self.row_contact = r
        for i in range(T):
            for c in range(R.NC):
                fx, fz = NZ * i + NQ + NV + 2 * c, NZ * i + NQ + NV + 2 * c + 1
                cc = _CONTACT_COLS[c]
                add([r, r], [fx, fz])          # Fx − μFz
                add([r + 1, r + 1], [fx, fz])  # −Fx − μFz
                add([r + 2], [fx])
                add([r + 3], [fz])
                for k in (4, 5):               # velocity x, z
                    add(np.full(6, r + k), NZ * i + NQ + cc)
                    add(np.full(6, r + k), NZ * i + cc)
                add(np.full(6, r + 6), NZ * i + cc)
                r += ROWS_PER_CONTACT

        self.row_joint = r
        for i in range(T):
            add(r + np.arange(6), qi(i)[3:])
            add(r + 6 + np.arange(6), vi(i)[3:])
            r += 12
        self.m = r
        self.rows = np.concatenate(rows)
        self.cols = np.concatenate(cols)
        self.assembler = TripletAssembler(self.rows, self.cols, (self.m, self.n))
        diag = np.arange(self.n)
        self.P_pattern = CscMatrix(self.n, self.n, np.arange(self.n + 1, dtype=np.intp),
                                   diag.astype(np.intp), np.zeros(self.n))

    @staticmethod
    def count_rows(T):
        return (NQ + NV) + (T - 1) * (NQ + 3) + T * (R.NC * ROWS_PER_CONTACT + 12)


@dataclass
class QpBuild:
    prob: QpProblem
    z_guess: np.ndarray
    z_des: np.ndarray
    flags: np.ndarray
    swing_ref: np.ndarray  # (T, 4) target heights, NaN in stance


_FD_STEP = 1e-6


def build_qp(state: R.RobotState, z_guess, z_des, gait: GaitState, settings: MpcSettings,
             model: R.ModelParams, layout: QpLayout | None = None, flags=None):
    T = settings.horizon
    z_guess = np.asarray(z_guess, dtype=float)
    if z_guess.shape != (T, NZ) or np.shape(z_des) != (T, NZ):
        raise ValueError(f"trajectories must have shape ({T}, {NZ})")
    if not np.isfinite(z_guess).all():
        raise ValueError("non-finite linearization point")
    if not state.is_finite():
        raise ValueError("non-finite state")
    layout = layout or QpLayout(T)
    dts = np.asarray(settings.dt)
    if flags is None:
        flags = gait.horizon_flags(dts)
    mu = settings.mu if settings.mu is not None else model.mu
    arr = model.arrays()

    qg, vg, Fg = z_guess[:, :NQ], z_guess[:, NQ:NQ + NV], z_guess[:, NQ + NV:]
    terms = R.compute_terms_batch(model, qg, vg)
    Jc, Jcd, pc, vc = terms.Jc, terms.Jcdot, terms.pc, terms.vc
    lo = np.empty(layout.m)
    hi = np.empty(layout.m)

    # initial state
    r = layout.row_init
    lo[r:r + NQ] = hi[r:r + NQ] = state.q - qg[0]
    lo[r + NQ:r + NQ + NV] = hi[r + NQ:r + NQ + NV] = state.qd - vg[0]
    v_init = np.ones(NQ + NV)

    # integration q_{i+1} − q_i − Δt_i q̇_{i+1} = 0
    r = layout.row_integ
    one = np.ones((T - 1, NQ))
    v_integ = np.hstack([one, -one, -dts[:-1, None] * one])
    resid = qg[1:] - qg[:-1] - dts[:-1, None] * vg[1:]
    lo[r:r + (T - 1) * NQ] = hi[r:r + (T - 1) * NQ] = -resid.ravel()

    # base dynamics linearized at the guess
    r = layout.row_dyn
    acc = np.ascontiguousarray((vg[1:] - vg[:-1]) / dts[:-1, None])
    Mb = terms.M[:-1, :3] / dts[:-1, None, None]
    JbT = Jc[:-1, :, :3].transpose(0, 2, 1)
    if settings.dyn_config_terms:
        dres = np.empty((T - 1, 3))
        djac = np.empty((T - 1, 3, NQ - 2))
        kernels.base_dynamics_fd(model.geometry_vector(), np.ascontiguousarray(qg[:-1]),
                                 np.ascontiguousarray(vg[:-1]), acc,
                                 np.ascontiguousarray(Fg[:-1]), _FD_STEP, dres, djac)
    else:
        # M_b, h_b, J_b frozen at the guess; zero columns keep the pattern fixed
        dres = (np.einsum("ijk,ik->ij", terms.M[:-1, :3], acc) + terms.h[:-1, :3]
                - np.einsum("ijk,ik->ij", JbT, Fg[:-1]))
        djac = np.zeros((T - 1, 3, NQ - 2))
    v_dyn = np.hstack([Mb.reshape(T - 1, -1), -Mb.reshape(T - 1, -1),
                       -JbT.reshape(T - 1, -1), djac.reshape(T - 1, -1)])
    lo[r:r + 3 * (T - 1)] = hi[r:r + 3 * (T - 1)] = -dres.ravel()

    # contacts: friction cone, unilateral force, stance velocity, swing height
    r = layout.row_contact
    nc = T * R.NC * ROWS_PER_CONTACT
    J4 = np.take_along_axis(Jc.reshape(T, R.NC, 2, NQ), _CC[None, :, None, :], axis=3)
    Jd4 = np.take_along_axis(Jcd.reshape(T, R.NC, 2, NQ), _CC[None, :, None, :], axis=3)
    fixed = np.broadcast_to([1.0, -mu, -1.0, -mu, 1.0, 1.0], (T, R.NC, 6))
    v_contact = np.concatenate([fixed, J4[:, :, 0], Jd4[:, :, 0], J4[:, :, 1],
                                Jd4[:, :, 1], J4[:, :, 1]], axis=2)
    clo = np.full((T, R.NC, ROWS_PER_CONTACT), -INF)
    chi = np.full((T, R.NC, ROWS_PER_CONTACT), INF)
    fx, fz = Fg[:, 0::2], Fg[:, 1::2]
    stance = np.asarray(flags, dtype=bool)
    swing = ~stance
    later = np.zeros((T, 1), dtype=bool)
    later[1:] = True
    chi[..., 0] = np.where(stance, mu * fz - fx, INF)
    chi[..., 1] = np.where(stance, mu * fz + fx, INF)
    clo[..., 2] = np.where(swing, -fx, -INF)
    chi[..., 2] = np.where(swing, -fx, INF)
    clo[..., 3] = -fz
    chi[..., 3] = np.where(swing, -fz, INF)
    pin = stance & later
    for k in (0, 1):
        clo[..., 4 + k] = np.where(pin, -vc[..., k], -INF)
        chi[..., 4 + k] = np.where(pin, -vc[..., k], INF)
    ahead = np.concatenate([[0.0], np.cumsum(dts)[:-1]])
    tsw = gait.swing_time(ahead[:, None])
    lift = swing & later
    swing_ref = np.full((T, R.NC), np.nan)
    swing_ref[lift] = bezier_heights(tsw[lift], settings.swing_height,
                                     settings.v_to, settings.v_td)
    clo[..., 6] = np.where(lift, swing_ref - pc[..., 1], -INF)
    chi[..., 6] = np.where(lift, swing_ref - pc[..., 1], INF)
    lo[r:r + nc] = clo.ravel()
    hi[r:r + nc] = chi.ravel()

    # joint limits (free at node 0, which is pinned to the measurement)
    r = layout.row_joint
    jlo = np.hstack([arr.q_lo - qg[:, 3:], -arr.qd_max - vg[:, 3:]])
    jhi = np.hstack([arr.q_hi - qg[:, 3:], arr.qd_max - vg[:, 3:]])
    jlo[0], jhi[0] = -INF, INF
    lo[r:r + 12 * T] = jlo.ravel()
    hi[r:r + 12 * T] = jhi.ravel()
    v_joint = np.ones(12 * T)

    vals = [v_init, v_integ.ravel(), v_dyn.ravel(), v_contact.ravel(), v_joint]
    A = layout.assembler.assemble(np.concatenate(vals))
    W = settings.weight_vector()
    Pdiag = (W[None, :] * dts[:, None]).ravel()
    P = CscMatrix(layout.n, layout.n, layout.P_pattern.col_ptr, layout.P_pattern.row_idx, Pdiag)
    q_lin = Pdiag * (z_guess - z_des).ravel()
    prob = QpProblem(P, q_lin, A, lo, hi)
    return QpBuild(prob, z_guess, np.asarray(z_des), flags, swing_ref)


# ---------------------------------------------------------------------------
# Solution and controller
# ---------------------------------------------------------------------------


@dataclass
class MpcSolution:
    z_star: np.ndarray
    tau_ff: np.ndarray
    q_set: np.ndarray
    qd_set: np.ndarray
    V_mpc: float
    status: str = "ok"
    prim_res: float = np.nan
    dual_res: float = np.nan
    delta_inf: float = np.nan
    message: str = ""
    timings: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == "ok"

    @property
    def q(self):
        return self.z_star[:, :NQ]

    @property
    def qd(self):
        return self.z_star[:, NQ:NQ + NV]

    @property
    def F(self):
        return self.z_star[:, NQ + NV:]


def _failed(T, message, timings=None):
    nan = np.full((T, NZ), np.nan)
    return MpcSolution(nan, np.zeros(6), np.full(6, np.nan), np.full(6, np.nan), np.nan,
                       "failed", message=message, timings=timings or {})


class MpcController:
    """Owns the fixed-pattern workspace for one MPC instance."""

    def __init__(self, settings: MpcSettings = MpcSettings(), model: R.ModelParams = R.ModelParams()):
        self.settings = settings
        self.model = model
        self.layout = QpLayout(settings.horizon)
        self.kkt = KktAssembler(self.layout.P_pattern, self._pattern_A())
        self.symbolic = None
        self.last_build = None
        self.last_delta = None

    def _pattern_A(self):
        lay = self.layout
        return lay.assembler.assemble(np.zeros(len(lay.rows)))

    def step(self, state: R.RobotState, cmd: MpcCommand, gait: GaitState, prev: MpcSolution | None = None):
        s, model = self.settings, self.model
        T = s.horizon
        timings = dict.fromkeys(STAGES, 0.0)
        clock = time.perf_counter
        try:
            t0 = clock()
            dts = np.asarray(s.dt)
            flags = gait.horizon_flags(dts)
            if s.warm_start and prev is not None and prev.ok:
                z_guess = shifted_guess(prev.z_star, state)
            else:
                z_guess = initial_guess(state, model, flags)
            t1 = clock()
            z_des = desired_trajectory(state, cmd, gait, s, model, flags)
            t2 = clock()
            build = build_qp(state, z_guess, z_des, gait, s, model, self.layout, flags)
            t3 = clock()
            prob = build.prob
            if s.scaling_iters > 0:
                solved_prob, scaling = scale_problem(prob, s.scaling_iters, self.kkt)
            else:
                solved_prob, scaling = prob, None
            t4 = clock()
            solver = QpSolver(solved_prob, s.admm(), self.kkt, self.symbolic)
            self.symbolic = solver.factors.symbolic
            t5 = clock()
            sol = solver.solve()
            if scaling is not None:
                sol = unscale_solution(sol, scaling, prob)
            t6 = clock()
            timings.update(init_guess=t1 - t0, param=t2 - t1, kkt_build=t3 - t2,
                           ruiz=t4 - t3, factorize=t5 - t4, admm=t6 - t5)
            if not np.isfinite(sol.x).all():
                raise DivergenceError(s.n_qp)
            delta = sol.x.reshape(T, NZ)
            z_star = z_guess + delta
            qdd0 = (z_star[1, NQ:NQ + NV] - z_star[0, NQ:NQ + NV]) / dts[0]
            q0, v0, F0 = z_star[0, :NQ], z_star[0, NQ:NQ + NV], z_star[0, NQ + NV:]
            tau_ff, _ = R.inverse_dynamics_torque(model, q0, v0, qdd0, F0)
            timings["rnea"] = clock() - t6
        except (SingularMatrixError, StructuralError, DivergenceError, ValueError,
                FloatingPointError, np.linalg.LinAlgError) as exc:
            return _failed(T, f"{type(exc).__name__}: {exc}", timings)
        if not np.isfinite(tau_ff).all():
            return _failed(T, "non-finite feedforward torque", timings)
        self.last_build = build
        self.last_delta = delta
        return MpcSolution(z_star, tau_ff, q0[3:].copy(), v0[3:].copy(),
                           qp_value(prob, sol.x), "ok", sol.prim_res, sol.dual_res,
                           float(np.abs(sol.x).max()), "", timings)


_CONTROLLERS: dict = {}


def rti_step(state, cmd, gait, settings: MpcSettings = MpcSettings(),
             model: R.ModelParams = R.ModelParams(), prev=None):
    """One real-time iteration using a cached per-(settings, model) controller."""
    key = (settings, model)
    ctl = _CONTROLLERS.get(key)
    if ctl is None:
        if len(_CONTROLLERS) > 32:
            _CONTROLLERS.clear()
        ctl = _CONTROLLERS[key] = MpcController(settings, model)
    return ctl.step(state, cmd, gait, prev)


def mpc_torque(solution: MpcSolution, state: R.RobotState, model: R.ModelParams):
    if not solution.ok:
        raise RuntimeError(f"MPC solution failed: {solution.message}")
    return R.pd_torque(model, solution.q_set, solution.qd_set, state.q, state.qd,
                       solution.tau_ff)
