"""Residual policy: MLP, PPO loss with hand-written gradients, GAE, blending.

Networks are plain numpy. Weights are stored input-major, so a layer is
``x @ W + b``. The policy and value functions are separate MLPs with the
same trunk shape; the policy's output layer starts at exactly zero, so the
initial action mean is zero for every observation.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import robot as R

# ---------------------------------------------------------------------------
# Observation
# ---------------------------------------------------------------------------

OBS_LAYOUT = (
    ("base_height", 1),
    ("pitch_sin_cos", 2),
    ("q_joint", 6),
    ("v_base", 2),  # (vx, vz)
    ("pitch_rate", 1),
    ("qd_joint", 6),
    ("phase_sin_cos", 4),  # right foot (sin, cos), left foot (sin, cos)
    ("V_mpc", 1),
)
OBS_DIM = sum(w for _, w in OBS_LAYOUT)
ACT_DIM = 6
V_SCALE = 1e-2
# written into the (already scaled) V slot when the MPC failed this tick
V_SENTINEL = 10.0
_FOOT_CONTACT = (0, 2)  # toe index used for each foot's phase


def obs_slices():
    out, off = {}, 0
    for name, w in OBS_LAYOUT:
        out[name] = slice(off, off + w)
        off += w
    return out


def observe(robot: R.RobotState, gait, solution=None, v_scale=V_SCALE):
    """Observation vector in ``OBS_LAYOUT`` order.

    ``solution`` is the MPC result for this tick; ``None`` or a failed one
    puts ``V_SENTINEL`` in the value slot. MPC torques and predicted states
    are deliberately not observed.
    """
    q, qd = robot.q, robot.qd
    ph = 2.0 * np.pi * gait.contact_phases()[list(_FOOT_CONTACT)]
    if solution is not None and solution.ok and np.isfinite(solution.V_mpc):
        v = v_scale * solution.V_mpc
    else:
        v = V_SENTINEL
    return np.concatenate([
        [q[1]], [np.sin(q[2]), np.cos(q[2])], q[R.NB:],
        qd[:2], [qd[2]], qd[R.NB:],
        [np.sin(ph[0]), np.cos(ph[0]), np.sin(ph[1]), np.cos(ph[1])],
        [v],
    ])


# ---------------------------------------------------------------------------
# Blending
# ---------------------------------------------------------------------------

BLENDS = ("joint-joint", "joint-torque", "torque-torque")


def blend(tau_mpc, q_set, qd_set, tau_ff, action, q, qd, strategy, lam, model: R.ModelParams):
    """Combine the MPC output with a residual action into joint torques.

    joint-joint   Kp(q_set + lam a − q_j) + Kd(qd_set − qd_j) + tau_ff
    joint-torque  tau_mpc + lam [Kp(a + q_nom − q_j) − Kd qd_j]
    torque-torque tau_mpc + lam a

    ``q``/``qd`` are full generalized vectors; the result is clamped to the
    torque limits.
    """
    a = np.asarray(action, dtype=float)
    if strategy == "joint-joint":
        return R.pd_torque(model, q_set + lam * a, qd_set, q, qd, tau_ff)
    arr = model.arrays()
    if strategy == "joint-torque":
        q_nom = R.nominal_pose(model)[R.NB:]
        res = arr.kp * (a + q_nom - q[R.NB:]) - arr.kd * qd[R.NB:]
        return R.clamp_torque(model, tau_mpc + lam * res)
    if strategy == "torque-torque":
        return R.clamp_torque(model, tau_mpc + lam * a)
    raise ValueError(f"unknown blending strategy {strategy!r}; expected one of {BLENDS}")


# ---------------------------------------------------------------------------
# Parameters and forward pass
# ---------------------------------------------------------------------------


@dataclass
class PolicyParams:
    arrays: dict
    obs_dim: int
    act_dim: int
    hidden: int
    n_hidden: int

    def names(self):
        return list(self.arrays)

    def copy(self):
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()},
                            self.obs_dim, self.act_dim, self.hidden, self.n_hidden)

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def set_flat(self, x):
        off = 0
        for k, v in self.arrays.items():
            v[...] = x[off:off + v.size].reshape(v.shape)
            off += v.size

    def is_finite(self):
        return all(np.isfinite(v).all() for v in self.arrays.values())

    @property
    def log_std(self):
        return self.arrays["log_std"]


def _layer_names(prefix, n_hidden):
    return [(f"{prefix}_W{i}", f"{prefix}_b{i}") for i in range(n_hidden + 1)]


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    qm, r = np.linalg.qr(a)
    qm *= np.sign(np.diag(r))
    w = qm if n_in >= n_out else qm.T
    return gain * w[:n_in, :n_out]


def init_policy(rng: np.random.Generator, obs_dim=OBS_DIM, act_dim=ACT_DIM, hidden=64,
                n_hidden=3, init_log_std=np.log(0.5)) -> PolicyParams:
    arrays = {}
    for prefix, out_dim in (("pi", act_dim), ("v", 1)):
        dims = [obs_dim] + [hidden] * n_hidden + [out_dim]
        for i, (wn, bn) in enumerate(_layer_names(prefix, n_hidden)):
            last = i == n_hidden
            if last and prefix == "pi":
                arrays[wn] = np.zeros((dims[i], dims[i + 1]))
            else:
                arrays[wn] = _orthogonal(rng, dims[i], dims[i + 1], 1.0 if last else np.sqrt(2.0))
            arrays[bn] = np.zeros(dims[i + 1])
    arrays["log_std"] = np.full(act_dim, float(init_log_std))
    return PolicyParams(arrays, obs_dim, act_dim, hidden, n_hidden)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _mlp(arrays, prefix, n_hidden, x):
    acts, pre = [x], []
    h = x
    names = _layer_names(prefix, n_hidden)
    for wn, bn in names[:-1]:
        z = h @ arrays[wn] + arrays[bn]
        pre.append(z)
        h = elu(z)
        acts.append(h)
    wn, bn = names[-1]
    return h @ arrays[wn] + arrays[bn], (acts, pre)


def _mlp_backward(arrays, prefix, n_hidden, cache, dout, grads):
    acts, pre = cache
    names = _layer_names(prefix, n_hidden)
    wn, bn = names[-1]
    grads[wn] = acts[-1].T @ dout
    grads[bn] = dout.sum(axis=0)
    dh = dout @ arrays[wn].T
    for i in range(n_hidden - 1, -1, -1):
        wn, bn = names[i]
        dz = dh * _elu_grad(pre[i])
        grads[wn] = acts[i].T @ dz
        grads[bn] = dz.sum(axis=0)
        if i:
            dh = dz @ arrays[wn].T


def policy_forward(params: PolicyParams, obs):
    """(action mean, log-std, value) for a single observation or a batch."""
    x = np.atleast_2d(np.asarray(obs, dtype=float))
    if x.shape[1] != params.obs_dim:
        raise ValueError(f"observation has {x.shape[1]} entries, policy expects {params.obs_dim}")
    mean, _ = _mlp(params.arrays, "pi", params.n_hidden, x)
    value, _ = _mlp(params.arrays, "v", params.n_hidden, x)
    if np.ndim(obs) == 1:
        return mean[0], params.log_std.copy(), float(value[0, 0])
    return mean, np.broadcast_to(params.log_std, mean.shape).copy(), value[:, 0]


def gaussian_log_prob(actions, mean, log_std):
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * np.log(2 * np.pi)


def sample_actions(params: PolicyParams, obs, rng: np.random.Generator):
    mean, log_std, value = policy_forward(params, obs)
    actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return actions, gaussian_log_prob(actions, mean, params.log_std), value


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    lr: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 1.0
    max_grad_norm: float = 1.0
    n_steps: int = 24
    blend_lambda: float = 0.1
    blend: str = "joint-torque"
    hidden: int = 64
    n_hidden: int = 3
    init_log_std: float = float(np.log(0.5))
    v_scale: float = V_SCALE
    normalize_advantages: bool = True

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.blend_lambda < 0:
            raise ValueError("blend_lambda must be >= 0")
        if self.blend not in BLENDS:
            raise ValueError(f"unknown blending strategy {self.blend!r}")
        if min(self.epochs, self.minibatches, self.n_steps, self.hidden, self.n_hidden) < 1:
            raise ValueError("epochs, minibatches, n_steps and layer sizes must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.obs)

    def subset(self, idx):
        return Batch(self.obs[idx], self.actions[idx], self.logp_old[idx],
                     self.advantages[idx], self.returns[idx])


def ppo_loss(params: PolicyParams, batch: Batch, cfg: PpoConfig = PpoConfig(), grad=True):
    """Clipped surrogate + value + entropy loss and its gradient.

    Returns ``(loss, grads, stats)``; ``grads`` maps each parameter name to
    an array of the same shape (``None`` when ``grad`` is false).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    n = len(batch)
    a = params.arrays
    mean, pcache = _mlp(a, "pi", params.n_hidden, batch.obs)
    value, vcache = _mlp(a, "v", params.n_hidden, batch.obs)
    value = value[:, 0]
    log_std = a["log_std"]
    inv_std = np.exp(-log_std)
    z = (batch.actions - mean) * inv_std
    logp = -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * params.act_dim * np.log(2 * np.pi)
    ratio = np.exp(logp - batch.logp_old)
    adv = batch.advantages
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    surr = np.minimum(s1, s2)
    verr = value - batch.returns
    entropy = float(np.sum(log_std) + 0.5 * params.act_dim * (1.0 + np.log(2 * np.pi)))
    pi_loss = -float(surr.mean())
    v_loss = float(np.mean(verr * verr))
    loss = pi_loss + cfg.value_coef * v_loss - cfg.entropy_coef * entropy
    stats = {
        "loss": loss, "policy_loss": pi_loss, "value_loss": v_loss, "entropy": entropy,
        "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    if not grad:
        return loss, None, stats
    # the unclipped branch is active on ties, so the gradient at ratio == 1 is adv
    dlogp = -np.where(s1 <= s2, adv, 0.0) * ratio / n
    grads = {}
    dmean = dlogp[:, None] * z * inv_std
    _mlp_backward(a, "pi", params.n_hidden, pcache, dmean, grads)
    dval = (2.0 * cfg.value_coef / n) * verr
    _mlp_backward(a, "v", params.n_hidden, vcache, dval[:, None], grads)
    grads["log_std"] = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - cfg.entropy_coef
    return loss, {k: grads[k] for k in a}, stats


def policy_backward(params, batch, cfg: PpoConfig = PpoConfig()):
    return ppo_loss(params, batch, cfg)[1]


def clip_grad_norm(grads: dict, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, params: PolicyParams, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params.arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def gae_advantages(rewards, values, dones, last_values, gamma=0.99, lam=0.95):
    """Generalized advantage estimates and value targets for a (T, N) buffer.

    ``dones[t]`` marks that the episode ended after step ``t``; the value of
    the next observation is then not bootstrapped. Advantages come back
    raw; normalization happens per update.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = len(rewards)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        nxt = last_values if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values


class TrainingDivergence(FloatingPointError):
    def __init__(self, message, params=None, stats=None):
        super().__init__(message)
        self.params = params
        self.stats = stats


def ppo_update(params: PolicyParams, opt: Adam, batch: Batch, cfg: PpoConfig, rng):
    """Epochs of minibatch Adam steps. Parameters are updated in place."""
    if cfg.normalize_advantages and len(batch) > 1:
        adv = batch.advantages
        batch = Batch(batch.obs, batch.actions, batch.logp_old,
                      (adv - adv.mean()) / (adv.std() + 1e-8), batch.returns)
    last_good = params.copy()
    stats = {}
    for _ in range(cfg.epochs):
        for idx in np.array_split(rng.permutation(len(batch)), cfg.minibatches):
            if len(idx) == 0:
                continue
            loss, grads, stats = ppo_loss(params, batch.subset(idx), cfg)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDivergence(f"non-finite PPO loss ({loss})", last_good, stats)
            grads, stats["grad_norm"] = clip_grad_norm(grads, cfg.max_grad_norm)
            opt.step(params, grads)
    if not params.is_finite():
        raise TrainingDivergence("non-finite parameters after update", last_good, stats)
    return stats


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"RMPCCKPT"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sHHI")


class CheckpointError(ValueError):
    pass


def config_hash(config) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, params: PolicyParams, config: dict, meta=None):
    header = {
        "arrays": [[k, list(v.shape)] for k, v in params.arrays.items()],
        "dims": [params.obs_dim, params.act_dim, params.hidden, params.n_hidden],
        "config": config,
        "config_hash": config_hash(config),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, default=str).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, 0, len(blob)))
        fh.write(blob)
        for v in params.arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path, expect_hash=None):
    """Returns ``(params, header)``; checks magic, version, size and hash."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_PREFIX.size:
        raise CheckpointError("file too short for a checkpoint")
    magic, version, _, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[_CKPT_PREFIX.size:_CKPT_PREFIX.size + hlen].decode())
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError("stored config does not match its hash")
    if expect_hash is not None and header["config_hash"] != expect_hash:
        raise CheckpointError("checkpoint was trained with a different configuration")
    body = memoryview(raw)[_CKPT_PREFIX.size + hlen:]
    arrays, off = {}, 0
    for name, shape in header["arrays"]:
        size = int(np.prod(shape, dtype=int))
        if off + 8 * size > len(body):
            raise CheckpointError("checkpoint truncated")
        arrays[name] = np.frombuffer(body[off:off + 8 * size], dtype="<f8").reshape(shape).copy()
        off += 8 * size
    if off != len(body):
        raise CheckpointError("trailing bytes after parameters")
    obs_dim, act_dim, hidden, n_hidden = header["dims"]
    return PolicyParams(arrays, obs_dim, act_dim, hidden, n_hidden), header
