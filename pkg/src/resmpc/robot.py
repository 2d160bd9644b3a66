"""Planar floating-base biped.

Generalized coordinates (9): base x, base z, base pitch, then left hip,
left knee, left ankle, right hip, right knee, right ankle. The base frame
sits at the hip joint. Angles are counter-clockwise about the out-of-plane
axis with x forward and z up; a link with world angle φ points along
(sin φ, −cos φ), so positive hip angles swing the leg forward and negative
knee angles fold the shank backwards.

Contact points are ordered (right toe, right heel, left toe, left heel) and
forces are packed as (Fx, Fz) per point, 8 entries in total.

M and h are assembled from body-point Jacobians, M = Σ mᵢJᵢᵀJᵢ + Iᵢ eᵢeᵢᵀ
and h = Σ mᵢJᵢᵀ(J̇ᵢq̇ + g e_z), which is exact for planar open chains.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from ._backend import kernels

NQ = 9
NB = 3
NJ = 6
NC = 4
NF = 2 * NC
CONTACT_NAMES = ("right_toe", "right_heel", "left_toe", "left_heel")
JOINT_NAMES = ("left_hip", "left_knee", "left_ankle",
               "right_hip", "right_knee", "right_ankle")
# contact index -> foot index (0 right, 1 left)
CONTACT_FOOT = (0, 0, 1, 1)


@dataclass(frozen=True)
class ModelParams:
    m_torso: float = 10.0
    l_torso: float = 0.4
    m_thigh: float = 2.5
    l_thigh: float = 0.4
    m_shank: float = 1.5
    l_shank: float = 0.4
    m_foot: float = 0.5
    l_foot: float = 0.18
    ankle_height: float = 0.04
    foot_com_x: float = 0.0
    foot_com_z: float = 0.02
    # rod inertias m l² / 12 unless given
    I_torso: float | None = None
    I_thigh: float | None = None
    I_shank: float | None = None
    I_foot: float | None = None
    q_lo: tuple = (-1.5, -2.4, -1.0, -1.5, -2.4, -1.0)
    q_hi: tuple = (1.5, 0.05, 1.0, 1.5, 0.05, 1.0)
    qd_max: tuple = (20.0,) * 6
    tau_max: tuple = (60.0, 80.0, 40.0, 60.0, 80.0, 40.0)
    kp: tuple = (30.0,) * 6
    kd: tuple = (1.0,) * 6
    # reflected rotor inertia added to each joint's diagonal of M
    armature: tuple = (0.02,) * 6
    mu: float = 0.7
    gravity: float = 9.81
    # lateral hip separation, used only by the self-collision check
    hip_width: float = 0.12
    nominal_knee: float = -0.7

    def __post_init__(self):
        for name in ("m_torso", "l_torso", "m_thigh", "l_thigh", "m_shank",
                     "l_shank", "m_foot", "l_foot", "mu", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("I_torso", "I_thigh", "I_shank", "I_foot"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        for name in _JOINT_VECTORS:
            v = getattr(self, name)
            if np.ndim(v) == 0:
                v = (float(v),) * NJ
            v = tuple(float(t) for t in v)
            if len(v) != NJ:
                raise ValueError(f"{name} needs {NJ} entries")
            object.__setattr__(self, name, v)
        if np.any(np.array(self.q_lo) >= np.array(self.q_hi)):
            raise ValueError("joint limits need lo < hi")
        if min(self.qd_max) <= 0 or min(self.tau_max) <= 0:
            raise ValueError("velocity and torque limits must be positive")
        if min(self.armature) < 0:
            raise ValueError("armature must be nonnegative")

    def inertia(self, body):
        given = getattr(self, f"I_{body}")
        if given is not None:
            return given
        return getattr(self, f"m_{body}") * getattr(self, f"l_{body}") ** 2 / 12.0

    @property
    def total_mass(self):
        return self.m_torso + 2.0 * (self.m_thigh + self.m_shank + self.m_foot)

    @property
    def weight(self):
        return self.total_mass * self.gravity

    def geometry_vector(self):
        return _geometry(self)

    def arrays(self):
        """Joint limits and gains as numpy arrays."""
        return _arrays(self)

    def scaled(self, mass_scale):
        """Copy with every mass (and default inertia) multiplied by ``mass_scale``."""
        kw = {f"m_{b}": getattr(self, f"m_{b}") * mass_scale
              for b in ("torso", "thigh", "shank", "foot")}
        for b in ("torso", "thigh", "shank", "foot"):
            kw[f"I_{b}"] = self.inertia(b) * mass_scale
        return replace(self, **kw)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


_JOINT_VECTORS = ("q_lo", "q_hi", "qd_max", "tau_max", "kp", "kd", "armature")


@lru_cache(maxsize=64)
def _geometry(p: ModelParams):
    g = np.array([p.l_torso, p.l_thigh, p.l_shank, 0.5 * p.l_foot, p.ankle_height,
                  p.foot_com_x, p.foot_com_z, p.m_torso, p.m_thigh, p.m_shank,
                  p.m_foot, p.inertia("torso"), p.inertia("thigh"),
                  p.inertia("shank"), p.inertia("foot"), p.gravity])
    g.flags.writeable = False
    return g


@dataclass(frozen=True)
class _Arrays:
    q_lo: np.ndarray
    q_hi: np.ndarray
    qd_max: np.ndarray
    tau_max: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    armature: np.ndarray


@lru_cache(maxsize=64)
def _arrays(p: ModelParams):
    out = {}
    for name in _JOINT_VECTORS:
        a = np.array(getattr(p, name))
        a.flags.writeable = False
        out[name] = a
    return _Arrays(**out)


@dataclass
class RobotState:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.q.shape != (NQ,) or self.qd.shape != (NQ,):
            raise ValueError("q and qd must have 9 entries")

    def copy(self):
        return RobotState(self.q.copy(), self.qd.copy())

    def is_finite(self):
        return bool(np.isfinite(self.q).all() and np.isfinite(self.qd).all())


@dataclass
class BipedTerms:
    M: np.ndarray
    h: np.ndarray
    pc: np.ndarray  # contact positions (4, 2)
    vc: np.ndarray  # contact velocities (4, 2)
    Jc: np.ndarray  # (8, 9), rows (x, z) per contact
    Jcdot: np.ndarray
    com: np.ndarray  # body centres of mass (7, 2)


@dataclass
class ContactSet:
    positions: np.ndarray
    velocities: np.ndarray
    jacobian: np.ndarray
    jacobian_dot: np.ndarray = field(repr=False, default=None)
    names: tuple = CONTACT_NAMES


def compute_terms(params: ModelParams, q, qd) -> BipedTerms:
    t = BipedTerms(np.empty((NQ, NQ)), np.empty(NQ), np.empty((NC, 2)),
                   np.empty((NC, 2)), np.empty((NF, NQ)), np.empty((NF, NQ)),
                   np.empty((7, 2)))
    kernels.biped_terms(params.geometry_vector(), np.ascontiguousarray(q, dtype=float),
                        np.ascontiguousarray(qd, dtype=float), t.M, t.h, t.pc,
                        t.vc, t.Jc, t.Jcdot, t.com)
    j = np.arange(NB, NQ)
    t.M[j, j] += params.arrays().armature
    return t


def compute_terms_batch(params: ModelParams, Q, V) -> BipedTerms:
    """``compute_terms`` over rows of Q and V; every field gains a leading axis."""
    Q = np.ascontiguousarray(Q, dtype=float)
    V = np.ascontiguousarray(V, dtype=float)
    n = Q.shape[0]
    t = BipedTerms(np.empty((n, NQ, NQ)), np.empty((n, NQ)), np.empty((n, NC, 2)),
                   np.empty((n, NC, 2)), np.empty((n, NF, NQ)), np.empty((n, NF, NQ)),
                   np.empty((n, 7, 2)))
    kernels.biped_terms_batch(params.geometry_vector(), Q, V, t.M, t.h, t.pc, t.vc,
                              t.Jc, t.Jcdot, t.com)
    j = np.arange(NB, NQ)
    t.M[:, j, j] += params.arrays().armature
    return t


def mass_matrix(params, q):
    return compute_terms(params, q, np.zeros(NQ)).M


def bias_forces(params, q, qd):
    return compute_terms(params, q, qd).h


def gravity_forces(params, q):
    return bias_forces(params, q, np.zeros(NQ))


def contact_kinematics(params, q, qd) -> ContactSet:
    t = compute_terms(params, q, qd)
    return ContactSet(t.pc, t.vc, t.Jc, t.Jcdot)


def base_dynamics_terms(params, q, qd):
    """Rows of M, h and Jᵀ for the three unactuated base coordinates.

    Returns (M_b 3×9, h_b 3, J_bᵀ 3×8).
    """
    t = compute_terms(params, q, qd)
    return t.M[:NB].copy(), t.h[:NB].copy(), t.Jc[:, :NB].T.copy()


def inverse_dynamics_torque(params, q, qd, qdd, F, terms: BipedTerms | None = None):
    """Joint torques M q̈ + h − JᵀF on the actuated rows.

    Returns ``(tau, base_residual)``; the residual is the same expression on
    the three base rows and vanishes for dynamically consistent (q̈, F).
    """
    t = terms if terms is not None else compute_terms(params, q, qd)
    gen = t.M @ qdd + t.h - t.Jc.T @ F
    return gen[NB:].copy(), gen[:NB].copy()


def pd_torque(params, q_des, qd_des, q, qd, tau_ff):
    """Kp(q_des − q_j) + Kd(qd_des − qd_j) + tau_ff, clamped to torque limits.

    ``q``/``qd`` may be full 9-vectors or the 6 joint entries.
    """
    a = params.arrays()
    qj = q[NB:] if len(q) == NQ else q
    qdj = qd[NB:] if len(qd) == NQ else qd
    tau = a.kp * (q_des - qj) + a.kd * (qd_des - qdj) + tau_ff
    return np.clip(tau, -a.tau_max, a.tau_max)


def clamp_torque(params, tau):
    a = params.arrays()
    return np.clip(tau, -a.tau_max, a.tau_max)


def potential_energy(params, q):
    com = compute_terms(params, q, np.zeros(NQ)).com
    masses = body_masses(params)
    return float(params.gravity * masses @ com[:, 1])


def kinetic_energy(params, q, qd):
    return float(0.5 * qd @ mass_matrix(params, q) @ qd)


def center_of_mass(params, q):
    com = compute_terms(params, q, np.zeros(NQ)).com
    masses = body_masses(params)
    return masses @ com / masses.sum()


def body_masses(p):
    return np.array([p.m_torso, p.m_thigh, p.m_shank, p.m_foot,
                     p.m_thigh, p.m_shank, p.m_foot])


def foot_frame(params, q, side):
    """Ankle position and foot world angle; ``side`` 0 is left, 1 is right."""
    th = q[2]
    hip, knee, ank = q[3 + 3 * side: 6 + 3 * side]
    phi_t = th + hip
    phi_s = phi_t + knee
    d = lambda phi: np.array([np.sin(phi), -np.cos(phi)])
    knee_p = q[:2] + params.l_thigh * d(phi_t)
    ankle_p = knee_p + params.l_shank * d(phi_s)
    return q[:2].copy(), knee_p, ankle_p, phi_s + ank


# ---------------------------------------------------------------------------
# Nominal standing pose
# ---------------------------------------------------------------------------


def _pose(params, hip, knee):
    q = np.zeros(NQ)
    ank = -(hip + knee)
    q[3:6] = q[6:9] = (hip, knee, ank)
    return q


@lru_cache(maxsize=64)
def _nominal(params: ModelParams):
    knee = params.nominal_knee

    def offset(hip):
        q = _pose(params, hip, knee)
        _, _, ankle, _ = foot_frame(params, q, 0)
        return center_of_mass(params, q)[0] - ankle[0]

    hip = brentq(offset, -1.2, 1.2, xtol=1e-15)
    q = _pose(params, hip, knee)
    pc = compute_terms(params, q, np.zeros(NQ)).pc
    q[1] = -pc[:, 1].min()
    q.flags.writeable = False
    return q


def nominal_pose(params: ModelParams):
    """Standing pose: knees bent, feet flat on z = 0, CoM over the ankles."""
    return _nominal(params).copy()


def nominal_height(params):
    return float(_nominal(params)[1])


def nominal_state(params, x=0.0):
    q = nominal_pose(params)
    q[0] = x
    return RobotState(q, np.zeros(NQ))


def static_contact_forces(params, q):
    """Equal vertical forces on all four contacts, zero horizontal."""
    F = np.zeros(NF)
    F[1::2] = params.weight / NC
    return F


# ---------------------------------------------------------------------------
# Leg segments (for self-collision)
# ---------------------------------------------------------------------------


def leg_segments(params, q):
    """3D endpoints of (shank, foot) for each leg, legs offset laterally.

    Returns a dict side -> list of (a, b) with points (x, y, z); the left leg
    sits at y = +hip_width/2 and the right leg at −hip_width/2.
    """
    out = {}
    for side, y in ((0, 0.5 * params.hip_width), (1, -0.5 * params.hip_width)):
        _, knee, ankle, phi_f = foot_frame(params, q, side)
        c, s = np.cos(phi_f), np.sin(phi_f)
        half, ah = 0.5 * params.l_foot, params.ankle_height
        toe = ankle + np.array([c * half + s * ah, s * half - c * ah])
        heel = ankle + np.array([-c * half + s * ah, -s * half - c * ah])
        lift = lambda p: np.array([p[0], y, p[1]])
        out[side] = [(lift(knee), lift(ankle)), (lift(heel), lift(toe))]
    return out
