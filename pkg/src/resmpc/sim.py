"""Planar penalty-contact simulator, rewards and termination.

Contacts are the four foot points. Each pushes back with a spring-damper
normal force f_n = max(0, k·d − c·ż) (d = penetration depth) and a smoothed
Coulomb tangential force −μ f_n tanh(ẋ / v_slip); the ground normal is
taken as vertical on uneven terrain too.

Each substep is linearly implicit in the contact terms:

    (M + h C + h² K) Δv = h f − h² K v,   v ← v + Δv,   q ← q + h v

where C and K are the contact damping and stiffness mapped through the
contact Jacobian. An explicit step is unstable for the 0.5 kg feet at the
default stiffness and a 2.5 ms substep.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import robot as R
from .mpc import GaitState, MpcCommand, MpcSettings

REWARD_TERMS = ("lin_vel", "ang_vel", "action_rate", "action_rate2", "torques",
                "orientation", "height", "joint_reg", "self_collision", "termination")
DEFAULT_REWARD_WEIGHTS = (10.0, 5.0, -1e-3, -1e-4, -1e-4, 1.0, 1.0, 1.0, -1.0, -100.0)
TERMINATION_REASONS = ("height", "orientation", "velocity", "self_collision")


class SimulationBlowup(FloatingPointError):
    def __init__(self, state, message="non-finite simulator state"):
        self.state = state
        super().__init__(message)


@dataclass(frozen=True)
class EnvConfig:
    control_dt: float = 0.01
    substeps: int = 4
    k_n: float = 5e4
    c_n: float = 500.0
    v_slip: float = 0.05
    joint_damping: float = 0.0
    # scale velocities back whenever a substep gains energy beyond actuator work
    energy_guard: bool = True
    terrain: str = "flat"
    terrain_amplitude: float = 0.04
    terrain_cell: float = 0.25
    terrain_seed: int = 0
    cmd_h_range: tuple | None = None  # None: nominal height
    cmd_vx_range: tuple = (0.0, 1.0)
    episode_length: float = 20.0
    friction_range: tuple = (0.5, 1.0)
    mass_scale_range: tuple = (0.9, 1.1)
    init_vel_max: float = 0.5  # |vx| bound, m/s
    init_pitch_rate_max: float = 0.5  # rad/s
    randomize: bool = True
    sigma_r: float = 0.25
    reward_weights: tuple = DEFAULT_REWARD_WEIGHTS
    height_bounds: tuple = (0.35, 1.2)
    pitch_limit: float = 1.0
    speed_limit: float = 10.0
    collision_radius: float = 0.04

    def __post_init__(self):
        if self.control_dt <= 0 or self.k_n <= 0 or self.c_n < 0 or self.v_slip <= 0:
            raise ValueError("timesteps, stiffness and slip velocity must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.terrain not in ("flat", "heightfield"):
            raise ValueError(f"unknown terrain {self.terrain!r}")
        if len(self.reward_weights) != len(REWARD_TERMS):
            raise ValueError("one reward weight per term")
        for name in ("cmd_vx_range", "friction_range", "mass_scale_range", "height_bounds"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be (lo, hi) with lo <= hi")
        object.__setattr__(self, "reward_weights", tuple(float(w) for w in self.reward_weights))

    def weights(self):
        return dict(zip(REWARD_TERMS, self.reward_weights))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# Terrain
# ---------------------------------------------------------------------------


class Terrain:
    """Ground height as a function of x; flat or a value-noise heightfield."""

    def __init__(self, config: EnvConfig):
        self.kind = config.terrain
        self.cell = config.terrain_cell
        self.amplitude = config.terrain_amplitude
        self.seed = config.terrain_seed
        self._cache: dict = {}

    def _node(self, i):
        v = self._cache.get(i)
        if v is None:
            rng = np.random.default_rng([self.seed, i & 0xFFFFFFFF, (i >> 32) & 0xFFFFFFFF])
            v = self._cache[i] = rng.uniform(-self.amplitude, self.amplitude)
        return v

    def height(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "flat":
            return np.zeros_like(x)
        s = x / self.cell
        i0 = np.floor(s).astype(np.int64)
        w = s - i0
        h0 = np.array([self._node(int(i)) for i in np.ravel(i0)]).reshape(np.shape(i0))
        h1 = np.array([self._node(int(i) + 1) for i in np.ravel(i0)]).reshape(np.shape(i0))
        return (1.0 - w) * h0 + w * h1


_TERRAINS: dict = {}


def terrain_for(config: EnvConfig):
    key = (config.terrain, config.terrain_cell, config.terrain_amplitude, config.terrain_seed)
    t = _TERRAINS.get(key)
    if t is None:
        t = _TERRAINS[key] = Terrain(config)
    return t


# ---------------------------------------------------------------------------
# State and physics
# ---------------------------------------------------------------------------


@dataclass
class EnvState:
    robot: R.RobotState
    gait: GaitState
    cmd: MpcCommand
    time: float = 0.0
    friction: float = 0.7
    contact_force: np.ndarray = field(default_factory=lambda: np.zeros(R.NF))
    rng: np.random.Generator | None = field(default=None, repr=False)

    def copy(self):
        return replace(self, robot=self.robot.copy(), contact_force=self.contact_force.copy())


def contact_forces(pc, vc, ground, config: EnvConfig, friction):
    """Per-point (Fx, Fz) plus damping and stiffness derivatives.

    Returns F (8,), damp (8,) = −∂F/∂v and stiff (8,) = −∂F/∂p, all packed
    as (x, z) per contact.
    """
    depth = ground - pc[:, 1]
    fn = config.k_n * depth - config.c_n * vc[:, 1]
    active = (depth > 0.0) & (fn > 0.0)
    fn = np.where(active, fn, 0.0)
    ratio = vc[:, 0] / config.v_slip
    th = np.tanh(ratio)
    ft = -friction * fn * th
    F = np.empty(R.NF)
    F[0::2], F[1::2] = ft, fn
    damp = np.zeros(R.NF)
    stiff = np.zeros(R.NF)
    damp[0::2] = np.where(active, friction * fn * (1.0 - th * th) / config.v_slip, 0.0)
    damp[1::2] = np.where(active, config.c_n, 0.0)
    stiff[1::2] = np.where(active, config.k_n, 0.0)
    return F, damp, stiff


def physics_step(state: EnvState, tau, config: EnvConfig, model: R.ModelParams):
    """Advance one control period with the joint torques ``tau`` held constant."""
    tau = R.clamp_torque(model, np.asarray(tau, dtype=float))
    terrain = terrain_for(config)
    h = config.control_dt / config.substeps
    q, v = state.robot.q.copy(), state.robot.qd.copy()
    f_avg = np.zeros(R.NF)
    gen_tau = np.zeros(R.NQ)
    gen_tau[R.NB:] = tau
    masses = R.body_masses(model)
    t = R.compute_terms(model, q, v)
    energy = _energy(t, v, masses, model, config, terrain) if config.energy_guard else 0.0
    for _ in range(config.substeps):
        ground = terrain.height(t.pc[:, 0])
        F, damp, stiff = contact_forces(t.pc, t.vc, ground, config, state.friction)
        f = gen_tau - t.h + t.Jc.T @ F
        if config.joint_damping:
            f[R.NB:] -= config.joint_damping * v[R.NB:]
        JC = t.Jc * damp[:, None]
        JK = t.Jc * stiff[:, None]
        A = t.M + h * (t.Jc.T @ JC) + h * h * (t.Jc.T @ JK)
        rhs = h * f - h * h * (t.Jc.T @ (JK @ v))
        v_new = v + np.linalg.solve(A, rhs)
        q_new = q + h * v_new
        t = R.compute_terms(model, q_new, v_new)
        if config.energy_guard:
            pot = _potential(t, masses, model, config, terrain)
            kin = 0.5 * v_new @ t.M @ v_new
            budget = energy + tau @ (q_new[R.NB:] - q[R.NB:]) - pot
            if kin > budget and kin > 0.0:
                v_new *= np.sqrt(max(budget, 0.0) / kin)
                t = R.compute_terms(model, q_new, v_new)
                kin = 0.5 * v_new @ t.M @ v_new
            energy = kin + pot
        q, v = q_new, v_new
        f_avg += F
    nxt = EnvState(R.RobotState(q, v), state.gait.advance(config.control_dt), state.cmd,
                   state.time + config.control_dt, state.friction,
                   f_avg / config.substeps, state.rng)
    if not nxt.robot.is_finite():
        raise SimulationBlowup(nxt)
    return nxt


def _potential(t, masses, model, config, terrain):
    depth = np.maximum(terrain.height(t.pc[:, 0]) - t.pc[:, 1], 0.0)
    return model.gravity * masses @ t.com[:, 1] + 0.5 * config.k_n * (depth @ depth)


def _energy(t, v, masses, model, config, terrain):
    return 0.5 * v @ t.M @ v + _potential(t, masses, model, config, terrain)


def mechanical_energy(model, q, v, config: EnvConfig | None = None, friction=0.7):
    """Kinetic + gravitational + contact-spring energy."""
    e = R.kinetic_energy(model, q, v) + R.potential_energy(model, q)
    if config is not None:
        pc = R.compute_terms(model, q, v).pc
        depth = np.maximum(terrain_for(config).height(pc[:, 0]) - pc[:, 1], 0.0)
        e += 0.5 * config.k_n * float(depth @ depth)
    return e


# ---------------------------------------------------------------------------
# Self-collision and termination
# ---------------------------------------------------------------------------


def segment_distance(p1, q1, p2, q2):
    """Minimum distance between 3D segments [p1, q1] and [p2, q2]."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    eps = 1e-15
    if a <= eps and e <= eps:
        return float(np.linalg.norm(r))
    if a <= eps:
        s, t = 0.0, np.clip(f / e, 0.0, 1.0)
    else:
        c = d1 @ r
        if e <= eps:
            t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    return float(np.linalg.norm(p1 + d1 * s - (p2 + d2 * t)))


def leg_clearance(robot: R.RobotState, model: R.ModelParams):
    segs = R.leg_segments(model, robot.q)
    return min(segment_distance(a0, a1, b0, b1) for a0, a1 in segs[0] for b0, b1 in segs[1])


def self_collision(robot: R.RobotState, model: R.ModelParams, radius=0.04):
    """True when the left and right shank/foot segments come closer than ``radius``."""
    return leg_clearance(robot, model) < radius


def check_termination(state: EnvState, config: EnvConfig, model: R.ModelParams = R.ModelParams(),
                      collided=None):
    """(terminated, reason); ``collided`` reuses a self-collision result."""
    q, qd = state.robot.q, state.robot.qd
    ground = float(terrain_for(config).height(q[0]))
    z = q[1] - ground
    lo, hi = config.height_bounds
    if not lo <= z <= hi:
        return True, "height"
    if abs(q[2]) > config.pitch_limit:
        return True, "orientation"
    if np.hypot(qd[0], qd[1]) > config.speed_limit:
        return True, "velocity"
    if collided is None:
        collided = self_collision(state.robot, model, config.collision_radius)
    if collided:
        return True, "self_collision"
    return False, ""


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------


@dataclass
class RewardBreakdown:
    terms: dict
    weights: dict
    total: float

    def weighted(self):
        return {k: self.weights[k] * v for k, v in self.terms.items()}

    def as_array(self):
        return np.array([self.terms[k] for k in REWARD_TERMS] + [self.total])


def reward_terms(nxt: EnvState, tau, action, action_hist, config: EnvConfig,
                 model: R.ModelParams, collided: bool, terminated: bool):
    sig = config.sigma_r
    q, qd = nxt.robot.q, nxt.robot.qd
    c = nxt.cmd
    dt = config.control_dt
    a = np.asarray(action, dtype=float)
    a1 = np.asarray(action_hist[0], dtype=float)
    a2 = np.asarray(action_hist[1], dtype=float)
    nominal = R.nominal_pose(model)[R.NB:]
    ground = float(terrain_for(config).height(q[0]))
    return {
        "lin_vel": float(np.exp(-((c.c_vx - qd[0]) / (1.0 + abs(c.c_vx))) ** 2 / sig)),
        "ang_vel": float(np.exp(-(c.c_wpitch - qd[2]) ** 2 / sig)),
        "action_rate": float(np.sum(((a - a1) / dt) ** 2)),
        "action_rate2": float(np.sum(((a - 2 * a1 + a2) / dt) ** 2)),
        "torques": float(np.sum(np.asarray(tau) ** 2)),
        # body-frame gravity along the torso's forward axis is −g sin(pitch)
        "orientation": float(np.exp(-np.sin(q[2]) ** 2 / sig)),
        "height": float(np.exp(-(c.c_h - (q[1] - ground)) ** 2 / sig)),
        "joint_reg": float(np.exp(-np.mean((q[R.NB:] - nominal) ** 2) / sig)),
        "self_collision": float(collided),
        "termination": float(terminated),
    }


def compute_rewards(prev: EnvState, nxt: EnvState, tau, action, action_hist,
                    config: EnvConfig, model: R.ModelParams = R.ModelParams(),
                    collided=None, terminated=None):
    """Table of weighted reward terms for the transition ``prev → nxt``.

    ``action_hist`` holds (a_{t−1}, a_{t−2}).
    """
    if len(action_hist) < 2:
        raise ValueError("action history needs the two previous actions")
    if collided is None:
        collided = self_collision(nxt.robot, model, config.collision_radius)
    if terminated is None:
        terminated = check_termination(nxt, config, model, collided)[0]
    terms = reward_terms(nxt, tau, action, action_hist, config, model, collided, terminated)
    w = config.weights()
    total = float(sum(w[k] * terms[k] for k in REWARD_TERMS))
    return RewardBreakdown(terms, w, total)


# ---------------------------------------------------------------------------
# Commands, randomization, reset
# ---------------------------------------------------------------------------


def sample_command(rng: np.random.Generator, config: EnvConfig, model: R.ModelParams):
    h_lo, h_hi = config.cmd_h_range or (R.nominal_height(model),) * 2
    v_lo, v_hi = config.cmd_vx_range
    return MpcCommand(float(rng.uniform(h_lo, h_hi)), float(rng.uniform(v_lo, v_hi)), 0.0)


def randomize_env(rng: np.random.Generator, config: EnvConfig, model: R.ModelParams):
    """Perturbed model, friction coefficient and initial base velocity."""
    if not config.randomize:
        return model, nominal_robot_state(model), model.mu
    scale = float(rng.uniform(*config.mass_scale_range))
    friction = float(rng.uniform(*config.friction_range))
    robot = nominal_robot_state(model)
    robot.qd[0] = rng.uniform(-config.init_vel_max, config.init_vel_max)
    robot.qd[2] = rng.uniform(-config.init_pitch_rate_max, config.init_pitch_rate_max)
    return model.scaled(scale), robot, friction


def nominal_robot_state(model):
    return R.nominal_state(model)


def reset_env(rng, config: EnvConfig, model: R.ModelParams, mpc: MpcSettings,
              cmd: MpcCommand | None = None):
    """Fresh episode: randomized model and initial state, sampled command."""
    env_model, robot, friction = randomize_env(rng, config, model)
    if cmd is None:
        cmd = sample_command(rng, config, model)
    state = EnvState(robot, mpc.gait(0.0), cmd, 0.0, friction, np.zeros(R.NF), rng)
    return env_model, state
