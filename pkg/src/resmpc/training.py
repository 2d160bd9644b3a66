"""Vectorized MPC + simulator environments and the PPO training loop.

One control tick of :class:`ResidualEnvs`:

1. the MPC for every env's current state has already been solved (it
   feeds the observation's value slot);
2. the policy samples actions from those observations;
3. actions are blended with the MPC output into torques;
4. each env is stepped, scored and reset on termination or time-out;
5. the MPC is solved for the new states.

The MPC runs on the nominal model; the simulator uses each env's
randomized model.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import policy as PL
from . import robot as R
from . import sim as S
from .batch import BatchHandle
from .mpc import MpcCommand, MpcSettings

LOG_COLUMNS = (["iteration", "mean_reward"] + [f"r_{k}" for k in S.REWARD_TERMS]
               + ["episode_length", "wall_time"])


def fallback_prior(robot: R.RobotState, model: R.ModelParams):
    """PD hold of the nominal joint pose, used when the MPC fails."""
    q_set = R.nominal_pose(model)[R.NB:]
    qd_set = np.zeros(6)
    ff = np.zeros(6)
    return R.pd_torque(model, q_set, qd_set, robot.q, robot.qd, ff), q_set, qd_set, ff


def mpc_prior(sol, robot, model):
    """(tau_mpc, q_set, qd_set, tau_ff) for one env."""
    if not sol.ok:
        return fallback_prior(robot, model)
    tau = R.pd_torque(model, sol.q_set, sol.qd_set, robot.q, robot.qd, sol.tau_ff)
    return tau, sol.q_set, sol.qd_set, sol.tau_ff


class ResidualEnvs:
    """``n_envs`` independent simulator instances, each with its own MPC."""

    def __init__(self, n_envs, env_config: S.EnvConfig = S.EnvConfig(),
                 mpc_settings: MpcSettings = MpcSettings(), model: R.ModelParams = R.ModelParams(),
                 ppo: PL.PpoConfig = PL.PpoConfig(), seed=0, workers=1, command=None,
                 stagger=True):
        self.n_envs = n_envs
        self.cfg = env_config
        self.settings = mpc_settings
        self.model = model
        self.ppo = ppo
        self.command = command
        self.obs_dim, self.act_dim = PL.OBS_DIM, PL.ACT_DIM
        self.handle = BatchHandle(n_envs, mpc_settings, model, workers)
        seqs = np.random.SeedSequence(seed).spawn(n_envs + 1)
        self.rngs = [np.random.default_rng(s) for s in seqs[:-1]]
        self.models = [None] * n_envs
        self.states = [None] * n_envs
        self.hist = np.zeros((n_envs, 2, PL.ACT_DIM))
        self.elapsed = np.zeros(n_envs)
        self.steps = np.zeros(n_envs, dtype=int)
        for i in range(n_envs):
            self._reset(i)
        if stagger:
            # spread time-outs so the rollout stream is not synchronized
            start = np.random.default_rng(seqs[-1]).uniform(0, env_config.episode_length, n_envs)
            self.elapsed[:] = np.floor(start / env_config.control_dt) * env_config.control_dt
        self._solve()

    def _solve(self):
        st = self.states
        self.solutions = self.handle.solve([s.robot for s in st], [s.cmd for s in st],
                                           [s.gait for s in st])

    def _reset(self, i):
        self.models[i], self.states[i] = S.reset_env(self.rngs[i], self.cfg, self.model,
                                                     self.settings, self.command)
        self.hist[i] = 0.0
        self.elapsed[i] = 0.0
        self.steps[i] = 0

    def observations(self):
        return np.array([PL.observe(s.robot, s.gait, sol, self.ppo.v_scale)
                         for s, sol in zip(self.states, self.solutions)])

    def step(self, actions):
        cfg, n = self.cfg, self.n_envs
        rewards = np.zeros(n)
        terms = np.zeros((n, len(S.REWARD_TERMS)))
        dones = np.zeros(n, dtype=bool)
        terminated = np.zeros(n, dtype=bool)
        reasons = [""] * n
        tau_mpc = np.zeros((n, 6))
        tau_out = np.zeros((n, 6))
        failed = np.array([not s.ok for s in self.solutions])
        ep_lengths = []
        for i in range(n):
            st, sol = self.states[i], self.solutions[i]
            tm, q_set, qd_set, ff = mpc_prior(sol, st.robot, self.model)
            tau = PL.blend(tm, q_set, qd_set, ff, actions[i], st.robot.q, st.robot.qd,
                           self.ppo.blend, self.ppo.blend_lambda, self.model)
            tau_mpc[i], tau_out[i] = tm, tau
            try:
                nxt = S.physics_step(st, tau, cfg, self.models[i])
            except S.SimulationBlowup:
                term, why, nxt, collided = True, "blowup", None, False
            else:
                collided = S.self_collision(nxt.robot, self.models[i], cfg.collision_radius)
                term, why = S.check_termination(nxt, cfg, self.models[i], collided)
            if nxt is not None:
                r = S.compute_rewards(st, nxt, tau, actions[i], self.hist[i], cfg,
                                      self.models[i], collided, term)
                terms[i] = [r.terms[k] for k in S.REWARD_TERMS]
                rewards[i] = r.total
            else:
                terms[i, S.REWARD_TERMS.index("termination")] = 1.0
                rewards[i] = cfg.weights()["termination"]
            self.hist[i, 1] = self.hist[i, 0]
            self.hist[i, 0] = actions[i]
            self.elapsed[i] += cfg.control_dt
            self.steps[i] += 1
            timeout = self.elapsed[i] >= cfg.episode_length - 1e-9
            terminated[i], reasons[i] = term, why
            dones[i] = term or timeout
            if dones[i]:
                ep_lengths.append(self.steps[i])
                self._reset(i)
            else:
                self.states[i] = nxt
        self._solve()
        info = {"terms": terms, "terminated": terminated, "reasons": reasons,
                "mpc_failed": failed, "tau_mpc": tau_mpc, "tau": tau_out,
                "episode_lengths": ep_lengths}
        return self.observations(), rewards, dones, info

    def close(self):
        self.handle.close()


@dataclass
class TrainResult:
    params: PL.PolicyParams
    log: list
    stats: list


def write_train_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([row[c] for c in LOG_COLUMNS])


def train(env, params: PL.PolicyParams, cfg: PL.PpoConfig, n_iters, seed=0, update=True,
          log_path=None, checkpoint_path=None, checkpoint_config=None, progress=None):
    """PPO on ``env``; ``update=False`` keeps the policy fixed (the baseline run).

    Action sampling and minibatch shuffling draw from separate streams, so
    a baseline and a training run with the same seed see identical
    rollouts until the first parameter update.
    """
    seqs = np.random.SeedSequence(seed).spawn(2)
    act_rng, upd_rng = np.random.default_rng(seqs[0]), np.random.default_rng(seqs[1])
    params = params.copy()
    opt = PL.Adam(params, cfg.lr)
    obs = env.observations()
    n, T = env.n_envs, cfg.n_steps
    rows, all_stats = [], []
    t_start = time.perf_counter()
    term_names = list(S.REWARD_TERMS)
    for it in range(n_iters):
        buf_obs = np.zeros((T, n, env.obs_dim))
        buf_act = np.zeros((T, n, env.act_dim))
        buf_logp = np.zeros((T, n))
        buf_val = np.zeros((T, n))
        buf_rew = np.zeros((T, n))
        buf_done = np.zeros((T, n))
        term_sum = np.zeros(len(term_names))
        lengths = []
        for t in range(T):
            actions, logp, values = PL.sample_actions(params, obs, act_rng)
            buf_obs[t], buf_act[t], buf_logp[t], buf_val[t] = obs, actions, logp, values
            obs, rew, done, info = env.step(actions)
            buf_rew[t], buf_done[t] = rew, done
            if "terms" in info:
                term_sum += info["terms"].sum(axis=0)
            lengths += list(info.get("episode_lengths", []))
        last_values = PL.policy_forward(params, obs)[2]
        adv, ret = PL.gae_advantages(buf_rew, buf_val, buf_done, last_values,
                                     cfg.gamma, cfg.gae_lambda)
        stats = {}
        if update:
            batch = PL.Batch(buf_obs.reshape(T * n, -1), buf_act.reshape(T * n, -1),
                             buf_logp.ravel(), adv.ravel(), ret.ravel())
            try:
                stats = PL.ppo_update(params, opt, batch, cfg, upd_rng)
            except PL.TrainingDivergence as exc:
                if checkpoint_path is not None:
                    PL.save_checkpoint(checkpoint_path, exc.params, checkpoint_config or {},
                                       {"iteration": it, "diverged": True})
                raise
        all_stats.append(stats)
        weights = np.array([S.DEFAULT_REWARD_WEIGHTS[i] if not hasattr(env, "cfg")
                            else env.cfg.reward_weights[i] for i in range(len(term_names))])
        row = {"iteration": it, "mean_reward": float(buf_rew.mean())}
        row.update({f"r_{k}": float(w * s / (T * n)) for k, w, s in zip(term_names, weights, term_sum)})
        row["episode_length"] = float(np.mean(lengths)) if lengths else float("nan")
        row["wall_time"] = time.perf_counter() - t_start
        rows.append(row)
        if progress is not None:
            progress(row, stats)
    if log_path is not None:
        write_train_log(rows, log_path)
    if checkpoint_path is not None:
        PL.save_checkpoint(checkpoint_path, params, checkpoint_config or {},
                           {"iterations": n_iters})
    return TrainResult(params, rows, all_stats)


def training_config(env_cfg, mpc_settings, model, ppo, seed):
    """JSON-able description hashed into checkpoints."""
    return {"env": env_cfg.to_dict(), "mpc": mpc_settings.__dict__.copy(),
            "model": model.__dict__.copy(), "ppo": ppo.to_dict(), "seed": seed}


class ToyTracking:
    """Small linear system for exercising PPO without the MPC.

    State x in R^k drifts as x' = A x + B a + noise, reward −|x|² − 1e-2|a|²,
    episodes last ``horizon`` steps. A zero action is a valid but poor
    prior, so a working trainer must improve on it.
    """

    def __init__(self, n_envs=16, obs_dim=4, act_dim=2, horizon=40, seed=0):
        self.n_envs, self.obs_dim, self.act_dim, self.horizon = n_envs, obs_dim, act_dim, horizon
        self.rng = np.random.default_rng(seed)
        self.A = 1.02 * np.eye(obs_dim)
        self.B = np.zeros((obs_dim, act_dim))
        for j in range(act_dim):
            self.B[j % obs_dim, j] = 0.2
        self.x = self.rng.uniform(-1, 1, (n_envs, obs_dim))
        self.t = np.zeros(n_envs, dtype=int)

    def observations(self):
        return self.x.copy()

    def step(self, actions):
        a = np.clip(actions, -3, 3)
        r = -np.sum(self.x ** 2, axis=1) - 1e-2 * np.sum(a ** 2, axis=1)
        self.x = self.x @ self.A.T + a @ self.B.T + 0.01 * self.rng.standard_normal(self.x.shape)
        self.x = np.clip(self.x, -5, 5)
        self.t += 1
        done = self.t >= self.horizon
        if done.any():
            self.x[done] = self.rng.uniform(-1, 1, (int(done.sum()), self.obs_dim))
            self.t[done] = 0
        return self.observations(), r, done, {}
