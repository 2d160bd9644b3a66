"""Closed-loop experiments and log analysis.

All experiments run deterministic rollouts: the residual policy acts with
its mean action, and each run draws its randomization from its own child
of the experiment seed. Results come back as row dataclasses and are
written as CSV by :func:`write_rows`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import astuple, dataclass, fields, replace

import numpy as np

from . import policy as PL
from . import robot as R
from . import sim as S
from .batch import BatchHandle
from .logio import TrajectoryLog
from .mpc import MpcCommand, MpcSettings
from .training import mpc_prior

ACHIEVED_TOL = 0.25  # m/s


class SingularConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Rows
# ---------------------------------------------------------------------------


@dataclass
class SurvivalRow:
    n_qp: int
    n_trials: int
    survived_fraction: float


@dataclass
class BoundaryRow:
    cmd_vx: float
    tracking_err: float
    achieved: bool


@dataclass
class PhaseMetricRow:
    phase_lo: float
    phase_hi: float
    count: int
    ratio_mean: float
    cosine_mean: float
    tau_res_mean: tuple
    tau_mpc_mean: tuple


@dataclass
class StudyRow:
    study: str
    variant: str
    controller: str
    n_runs: int
    survived_fraction: float
    mean_time: float
    mean_distance: float
    tracking_err: float


def _flat_header(row_type):
    out = []
    for f in fields(row_type):
        if f.name in ("tau_res_mean", "tau_mpc_mean"):
            out += [f"{f.name}_{j}" for j in range(6)]
        else:
            out.append(f.name)
    return out


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_rows(rows, path, row_type=None):
    row_type = row_type or type(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_flat_header(row_type))
        for r in rows:
            vals = []
            for v in astuple(r):
                vals += [_fmt(x) for x in v] if isinstance(v, tuple) else [_fmt(v)]
            w.writerow(vals)


# ---------------------------------------------------------------------------
# Closed-loop evaluation
# ---------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    survived: bool
    time: float
    distance: float
    reason: str
    mean_vx: float  # over the trailing window; NaN if the run ended early
    cmd_vx: float


def evaluate(controller, n_runs, seed=0, duration=5.0, env_config: S.EnvConfig = S.EnvConfig(),
             settings: MpcSettings = MpcSettings(), model: R.ModelParams = R.ModelParams(),
             params: PL.PolicyParams | None = None, ppo: PL.PpoConfig = PL.PpoConfig(),
             commands=None, window=None, workers=1, log=None):
    """Run ``n_runs`` episodes until termination or ``duration`` seconds.

    ``controller`` is "mpc" (MPC torques only) or "residual" (MPC blended
    with the policy's mean action). ``commands`` is one
    :class:`MpcCommand` for all runs, a list with one per run, or ``None``
    for the standing command. ``log`` is an optional
    :class:`~resmpc.logio.TrajectoryWriter` receiving one record per env
    per tick.
    """
    if controller not in ("mpc", "residual"):
        raise ValueError(f"unknown controller {controller!r}")
    if controller == "residual" and params is None:
        raise ValueError("residual evaluation needs trained policy parameters")
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if commands is None or isinstance(commands, MpcCommand):
        commands = [commands or MpcCommand.standing(model)] * n_runs
    dt = env_config.control_dt
    steps = int(round(duration / dt))
    window_steps = steps if window is None else int(round(window / dt))
    seqs = np.random.SeedSequence(seed).spawn(n_runs)
    models, states = [], []
    for i in range(n_runs):
        m, st = S.reset_env(np.random.default_rng(seqs[i]), env_config, model, settings, commands[i])
        models.append(m)
        states.append(st)
    x0 = np.array([st.robot.q[0] for st in states])
    alive = np.ones(n_runs, dtype=bool)
    reasons = [""] * n_runs
    end_time = np.full(n_runs, duration)
    vx_sum = np.zeros(n_runs)
    hist = np.zeros((n_runs, 2, 6))
    with BatchHandle(n_runs, settings, model, workers) as handle:
        for k in range(steps):
            sols = handle.solve([s.robot for s in states], [s.cmd for s in states],
                                [s.gait for s in states], active=alive)
            idx = np.flatnonzero(alive)
            if controller == "residual":
                obs = np.array([PL.observe(states[i].robot, states[i].gait, sols[i], ppo.v_scale)
                                for i in idx])
                acts = np.zeros((n_runs, 6))
                acts[idx] = PL.policy_forward(params, obs)[0]
            for i in idx:
                st, sol = states[i], sols[i]
                tm, qs, qds, ff = mpc_prior(sol, st.robot, model)
                if controller == "residual":
                    a = acts[i]
                    tau = PL.blend(tm, qs, qds, ff, a, st.robot.q, st.robot.qd,
                                   ppo.blend, ppo.blend_lambda, model)
                else:
                    a, tau = np.zeros(6), tm
                try:
                    nxt = S.physics_step(st, tau, env_config, models[i])
                except S.SimulationBlowup:
                    alive[i], reasons[i], end_time[i] = False, "blowup", st.time
                    continue
                collided = S.self_collision(nxt.robot, models[i], env_config.collision_radius)
                term, why = S.check_termination(nxt, env_config, models[i], collided)
                if log is not None:
                    r = S.compute_rewards(st, nxt, tau, a, hist[i], env_config, models[i],
                                          collided, term)
                    log.write(time=st.time, env=i, q=st.robot.q, qd=st.robot.qd, tau_mpc=tm,
                              tau_res=tau - tm, F_contact=nxt.contact_force,
                              phase=st.gait.contact_phases(), cmd=(st.cmd.c_h, st.cmd.c_vx),
                              rewards=r.as_array(), flags=(term, collided, not sol.ok))
                hist[i, 1], hist[i, 0] = hist[i, 0], a
                if k >= steps - window_steps:
                    vx_sum[i] += nxt.robot.qd[0]
                states[i] = nxt
                if term:
                    alive[i], reasons[i], end_time[i] = False, why, nxt.time
            if not alive.any():
                break
    out = []
    for i in range(n_runs):
        ok = bool(alive[i])
        out.append(EpisodeResult(ok, float(end_time[i]), float(states[i].robot.q[0] - x0[i]),
                                 reasons[i], float(vx_sum[i] / window_steps) if ok else np.nan,
                                 commands[i].c_vx))
    return out


def disturbance_config(base: S.EnvConfig = S.EnvConfig(), model: R.ModelParams = R.ModelParams()):
    """Only the initial velocity is randomized; nominal mass and friction."""
    return replace(base, randomize=True, mass_scale_range=(1.0, 1.0),
                   friction_range=(model.mu, model.mu))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def sweep_qp_iterations(grid, trials, seed=0, duration=5.0, env_config=None,
                        settings: MpcSettings = MpcSettings(), model=R.ModelParams(), workers=1):
    """MPC-only survival fraction per ADMM iteration count."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if len(grid) == 0:
        raise ValueError("empty n_qp grid")
    env_config = env_config or disturbance_config(model=model)
    rows = []
    for n_qp in grid:
        res = evaluate("mpc", trials, seed, duration, env_config, replace(settings, n_qp=int(n_qp)),
                       model, workers=workers)
        rows.append(SurvivalRow(int(n_qp), trials, float(np.mean([r.survived for r in res]))))
    return rows


def velocity_boundary(controller, grid, n_seeds=3, seed=0, duration=8.0, window=5.0,
                      env_config: S.EnvConfig = S.EnvConfig(), settings=MpcSettings(),
                      model=R.ModelParams(), params=None, ppo=PL.PpoConfig(), workers=1):
    """Achieved forward commands: every seed survives and mean |error| < 0.25 m/s."""
    if len(grid) == 0:
        raise ValueError("empty command grid")
    if controller == "residual" and params is None:
        raise ValueError("velocity boundary for the residual controller needs a checkpoint")
    cmds = [MpcCommand.standing(model, float(v)) for v in grid for _ in range(n_seeds)]
    res = evaluate(controller, len(cmds), seed, duration, env_config, settings, model, params,
                   ppo, cmds, window, workers)
    rows = []
    for j, v in enumerate(grid):
        chunk = res[j * n_seeds:(j + 1) * n_seeds]
        errs = [abs(r.mean_vx - v) if r.survived else np.inf for r in chunk]
        err = float(np.mean(errs))
        rows.append(BoundaryRow(float(v), err, bool(np.isfinite(err) and err < ACHIEVED_TOL)))
    return rows


def achieved_set(rows):
    return {r.cmd_vx for r in rows if r.achieved}


def _study_row(study, variant, controller, res):
    errs = [abs(r.mean_vx - r.cmd_vx) for r in res if r.survived]
    return StudyRow(study, variant, controller, len(res),
                    float(np.mean([r.survived for r in res])),
                    float(np.mean([r.time for r in res])),
                    float(np.mean([r.distance for r in res])),
                    float(np.mean(errs)) if errs else float("nan"))


def gait_modification_study(params, switches=(0.5, 0.65, 0.35), n_runs=8, seed=0, duration=5.0,
                            cmd_vx=0.25, env_config: S.EnvConfig = S.EnvConfig(),
                            settings=MpcSettings(), model=R.ModelParams(), ppo=PL.PpoConfig(),
                            controllers=("mpc", "residual"), workers=1):
    """Change the stance fraction after training: > 0.5 adds double stance, < 0.5 flight."""
    rows = []
    cmd = MpcCommand.standing(model, cmd_vx)
    for sw in switches:
        s = replace(settings, phase_switch=float(sw))
        for c in controllers:
            res = evaluate(c, n_runs, seed, duration, env_config, s, model, params, ppo, cmd,
                           workers=workers)
            rows.append(_study_row("gait", f"switch={sw:g}", c, res))
    return rows


def terrain_study(params, amplitude=0.04, swing_heights=(0.075, 0.15), n_runs=8, seed=0,
                  duration=5.0, cmd_vx=0.25, env_config: S.EnvConfig = S.EnvConfig(),
                  settings=MpcSettings(), model=R.ModelParams(), ppo=PL.PpoConfig(),
                  controllers=("mpc", "residual"), include_flat=True, workers=1):
    """Policies trained on flat ground evaluated on a heightfield, with swing height retuned."""
    rows = []
    cmd = MpcCommand.standing(model, cmd_vx)
    terrains = (["flat"] if include_flat else []) + ["heightfield"]
    for terrain in terrains:
        cfg = replace(env_config, terrain=terrain, terrain_amplitude=amplitude)
        for zs in swing_heights:
            s = replace(settings, swing_height=float(zs))
            for c in controllers:
                res = evaluate(c, n_runs, seed, duration, cfg, s, model, params, ppo, cmd,
                               workers=workers)
                rows.append(_study_row("terrain", f"{terrain}/z_swing={zs:g}", c, res))
    return rows


# ---------------------------------------------------------------------------
# Residual / MPC torque metrics
# ---------------------------------------------------------------------------


def torque_ratio_cosine(tau_res, tau_mpc):
    """Per-sample ‖τ_res‖/‖τ_mpc‖ and cosine; 0/0 gives NaN."""
    tau_res = np.atleast_2d(tau_res)
    tau_mpc = np.atleast_2d(tau_mpc)
    nr = np.linalg.norm(tau_res, axis=1)
    nm = np.linalg.norm(tau_mpc, axis=1)
    dot = np.sum(tau_res * tau_mpc, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(nm > 0, nr / np.where(nm > 0, nm, 1.0), np.where(nr > 0, np.inf, np.nan))
        # sqrt(|a|²|b|²) rather than |a||b|: exact ±1 for parallel vectors
        den = np.sqrt(np.sum(tau_res**2, axis=1) * np.sum(tau_mpc**2, axis=1))
        cos = np.where(den > 0, np.clip(dot / np.where(den > 0, den, 1.0), -1.0, 1.0), np.nan)
    return ratio, cos


def residual_metrics(log: TrajectoryLog, n_bins=50, contact=0):
    """Per phase bin: mean ratio, mean cosine and per-joint torque means.

    Phase is the gait phase of ``contact`` (the right toe by default, whose
    offset is zero, i.e. the global gait phase).
    """
    if len(log) == 0:
        raise ValueError("empty log")
    tau_res, tau_mpc = log["tau_res"], log["tau_mpc"]
    phase = log["phase"][:, contact]
    keep = np.isfinite(tau_res).all(axis=1) & np.isfinite(tau_mpc).all(axis=1) & np.isfinite(phase)
    if not keep.any():
        raise ValueError("log has no complete torque records")
    tau_res, tau_mpc, phase = tau_res[keep], tau_mpc[keep], phase[keep]
    ratio, cos = torque_ratio_cosine(tau_res, tau_mpc)
    b = np.minimum((phase * n_bins).astype(int), n_bins - 1)
    rows = []
    nan6 = (float("nan"),) * 6
    for k in range(n_bins):
        sel = b == k
        cnt = int(sel.sum())
        if cnt == 0:
            rows.append(PhaseMetricRow(k / n_bins, (k + 1) / n_bins, 0, np.nan, np.nan, nan6, nan6))
            continue
        r, c = ratio[sel], cos[sel]
        rows.append(PhaseMetricRow(
            k / n_bins, (k + 1) / n_bins, cnt,
            float(np.nanmean(r)) if np.isfinite(r).any() or np.isinf(r).any() else np.nan,
            float(np.nanmean(c)) if np.isfinite(c).any() else np.nan,
            tuple(float(v) for v in tau_res[sel].mean(axis=0)),
            tuple(float(v) for v in tau_mpc[sel].mean(axis=0))))
    return rows


# ---------------------------------------------------------------------------
# Joint torque -> foot wrench
# ---------------------------------------------------------------------------

_LEG_CONTACTS = {0: (2, 3), 1: (0, 1)}  # side (0 left, 1 right) -> (toe, heel)


def foot_jacobian(q, model: R.ModelParams, side):
    """3×3 Jacobian of the sole-centre (x, z, angle) w.r.t. one leg's joints.

    The sole centre is midway between toe and heel; the base is held fixed.
    """
    t = R.compute_terms(model, np.asarray(q, dtype=float), np.zeros(R.NQ))
    toe, heel = _LEG_CONTACTS[side]
    cols = slice(R.NB + 3 * side, R.NB + 3 * side + 3)
    jx = 0.5 * (t.Jc[2 * toe, cols] + t.Jc[2 * heel, cols])
    jz = 0.5 * (t.Jc[2 * toe + 1, cols] + t.Jc[2 * heel + 1, cols])
    return np.array([jx, jz, np.ones(3)])


def grw_map(tau_leg, q, model: R.ModelParams, side, gravity=False, max_cond=1e8):
    """Planar foot wrench (f_x, f_z, m_y) with τ = J_footᵀ W.

    W is the wrench the leg exerts through the sole centre; the ground
    reaction on the foot is −W. With ``gravity`` the leg links' own
    gravity torques are removed first, i.e. τ − g_leg = J_footᵀ W.
    """
    J = foot_jacobian(q, model, side)
    if np.linalg.cond(J) > max_cond:
        raise SingularConfigurationError("foot Jacobian is near-singular (straight knee?)")
    tau = np.asarray(tau_leg, dtype=float)
    if gravity:
        g = R.gravity_forces(model, q)
        tau = tau - g[R.NB + 3 * side:R.NB + 3 * side + 3]
    return np.linalg.solve(J.T, tau)


# ---------------------------------------------------------------------------
# Warm-start training comparison
# ---------------------------------------------------------------------------


@dataclass
class WarmStartRow:
    seed: int
    reward0_residual: float
    reward0_baseline: float
    tail_residual: float
    tail_baseline: float

    @property
    def margin(self):
        return self.tail_residual - self.tail_baseline


def _read_rewards(path):
    with open(path) as fh:
        return np.array([float(r["mean_reward"]) for r in csv.DictReader(fh)])


def warm_start_study(seeds, out_dir, n_iters=300, n_envs=32, tail=20,
                     env_config: S.EnvConfig = S.EnvConfig(), settings=MpcSettings(),
                     model=R.ModelParams(), ppo=PL.PpoConfig(), workers=1, progress=None):
    """Train the residual and run the frozen zero residual on identical seeds.

    Per seed writes ``train_s{seed}.csv``, ``baseline_s{seed}.csv`` and
    ``policy_s{seed}.ckpt`` under ``out_dir``; runs whose log already
    exists are skipped, so an interrupted study resumes.
    """
    from pathlib import Path

    from .training import ResidualEnvs, train, training_config

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    desc = {"n_iters": n_iters, "n_envs": n_envs,
            "config": training_config(env_config, settings, model, ppo, None)}
    desc = json.loads(json.dumps(desc, sort_keys=True, default=list))
    stamp = out / "study.json"
    if stamp.exists():
        if json.loads(stamp.read_text()) != desc:
            raise ValueError(f"{out} holds a study with a different configuration")
    else:
        stamp.write_text(json.dumps(desc, indent=1, sort_keys=True))
    rows = []
    for seed in seeds:
        logs = {}
        for kind, update in (("train", True), ("baseline", False)):
            log = out / f"{kind}_s{seed}.csv"
            if not log.exists():
                env = ResidualEnvs(n_envs, env_config, settings, model, ppo, seed=seed,
                                   workers=workers)
                try:
                    params = PL.init_policy(np.random.default_rng(seed), PL.OBS_DIM, PL.ACT_DIM,
                                            ppo.hidden, ppo.n_hidden, ppo.init_log_std)
                    ck = out / f"policy_s{seed}.ckpt" if update else None
                    tmp = log.with_suffix(".part")
                    train(env, params, ppo, n_iters, seed=seed, update=update, log_path=tmp,
                          checkpoint_path=ck,
                          checkpoint_config=training_config(env_config, settings, model, ppo, seed),
                          progress=progress)
                    tmp.replace(log)
                finally:
                    env.close()
            logs[kind] = _read_rewards(log)
        tr, bl = logs["train"], logs["baseline"]
        rows.append(WarmStartRow(int(seed), float(tr[0]), float(bl[0]),
                                 float(tr[-tail:].mean()), float(bl[-tail:].mean())))
    return rows


def sign_test(margins):
    """One-sided sign test p-value for 'margin > 0'; ties count against."""
    from scipy.stats import binomtest

    m = np.asarray(margins, dtype=float)
    return float(binomtest(int(np.sum(m > 0)), len(m), 0.5, alternative="greater").pvalue)
