from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from oracles import gae_bruteforce, mlp_oracle
from resmpc import mpc as M, policy as PL, robot as R, training as T

P = R.ModelParams()
RNG = np.random.default_rng


class FakeSolution:
    def __init__(self, V=0.0, ok=True):
        self.V_mpc, self.ok = V, ok


def random_params(seed=0, obs_dim=7, act_dim=3, hidden=8, n_hidden=2):
    rng = RNG(seed)
    p = PL.init_policy(rng, obs_dim, act_dim, hidden, n_hidden)
    for k, v in p.arrays.items():
        v[...] = 0.4 * rng.standard_normal(v.shape)
    return p


def random_batch(p, n=16, seed=1, spread=0.1):
    rng = RNG(seed)
    obs = rng.standard_normal((n, p.obs_dim))
    mean, log_std, _ = PL.policy_forward(p, obs)
    act = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp = PL.gaussian_log_prob(act, mean, p.log_std)
    return PL.Batch(obs, act, logp + rng.uniform(-spread, spread, n),
                    rng.standard_normal(n), rng.standard_normal(n))


# ---------------------------------------------------------------- observation


def test_observation_hand_assembled():
    rs = R.nominal_state(P)
    gait = M.GaitState(0.0)
    obs = PL.observe(rs, gait, FakeSolution(0.0))
    q = rs.q
    want = np.array([q[1], 0.0, 1.0, *q[3:], 0.0, 0.0, 0.0, *np.zeros(6),
                     0.0, 1.0, np.sin(np.pi), np.cos(np.pi), 0.0])
    np.testing.assert_allclose(obs, want, atol=1e-15)
    assert len(obs) == PL.OBS_DIM == 23


def test_phase_quarter_features():
    obs = PL.observe(R.nominal_state(P), M.GaitState(0.25), FakeSolution())
    sl = PL.obs_slices()["phase_sin_cos"]
    np.testing.assert_allclose(obs[sl][:2], [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(obs[sl][2:], [-1.0, 0.0], atol=1e-15)


def test_value_slot_scaling_and_sentinel():
    sl = PL.obs_slices()["V_mpc"]
    rs, g = R.nominal_state(P), M.GaitState()
    assert PL.observe(rs, g, FakeSolution(37.0))[sl][0] == pytest.approx(0.37)
    assert PL.observe(rs, g, FakeSolution(37.0, ok=False))[sl][0] == PL.V_SENTINEL
    assert PL.observe(rs, g, None)[sl][0] == PL.V_SENTINEL
    assert PL.observe(rs, g, FakeSolution(np.nan))[sl][0] == PL.V_SENTINEL


# ---------------------------------------------------------------- forward pass


@given(st.integers(0, 2**32 - 1))
@hsettings(max_examples=20)
def test_zero_initialized_mean(seed):
    p = PL.init_policy(RNG(seed))
    obs = RNG(seed + 1).normal(scale=3.0, size=(5, PL.OBS_DIM))
    mean, log_std, value = PL.policy_forward(p, obs)
    assert not mean.any()
    np.testing.assert_allclose(np.exp(log_std), 0.5)
    assert np.isfinite(value).all()


def test_forward_matches_scalar_oracle():
    p = random_params(3)
    obs = RNG(4).standard_normal((6, p.obs_dim))
    mean, _, value = PL.policy_forward(p, obs)
    np.testing.assert_allclose(mean, mlp_oracle(p.arrays, "pi", p.n_hidden, obs), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(value, mlp_oracle(p.arrays, "v", p.n_hidden, obs)[:, 0], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name,out", [("pi_W0", 0), ("v_W1", 2)])
def test_trunk_weight_reaches_output(name, out):
    p = random_params(5)
    obs = RNG(6).standard_normal(p.obs_dim)
    before = PL.policy_forward(p, obs)[out]
    p.arrays[name][0, 0] += 0.5
    after = PL.policy_forward(p, obs)[out]
    assert np.any(np.asarray(before) != np.asarray(after))


def test_single_and_batch_forward_agree():
    p = random_params(7)
    obs = RNG(8).standard_normal((3, p.obs_dim))
    mean, _, value = PL.policy_forward(p, obs)
    m1, _, v1 = PL.policy_forward(p, obs[1])
    np.testing.assert_allclose(m1, mean[1], rtol=1e-14)
    assert v1 == pytest.approx(value[1], rel=1e-14)
    with pytest.raises(ValueError):
        PL.policy_forward(p, np.zeros(p.obs_dim + 1))


# ---------------------------------------------------------------- gradients


def fd_check(p, batch, cfg, h=1e-6):
    _, grads, _ = PL.ppo_loss(p, batch, cfg)
    worst = 0.0
    for name, arr in p.arrays.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = PL.ppo_loss(p, batch, cfg, grad=False)[0]
            arr[idx] = old - h
            lm = PL.ppo_loss(p, batch, cfg, grad=False)[0]
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            g = grads[name][idx]
            err = abs(g - fd) / max(abs(g), abs(fd), 1e-5)
            worst = max(worst, err)
    return worst


@pytest.mark.parametrize("spread", [0.1, 0.6])  # 0.6 puts some ratios outside the clip band
def test_gradients_match_finite_differences(spread):
    p = random_params(9)
    cfg = PL.PpoConfig(entropy_coef=0.01, value_coef=0.5)
    assert fd_check(p, random_batch(p, 16, 10, spread), cfg) <= 1e-4


def test_zero_advantage_leaves_policy_mean_alone():
    p = random_params(11)
    b = random_batch(p)
    b.advantages[:] = 0.0
    _, grads, _ = PL.ppo_loss(p, b, PL.PpoConfig(entropy_coef=0.0))
    for k, g in grads.items():
        if k.startswith("pi_") or k == "log_std":
            assert not g.any(), k


def test_gradients_are_linear_in_advantage_scale():
    p = random_params(12)
    b = random_batch(p)
    cfg = PL.PpoConfig(value_coef=0.0)
    g1 = PL.ppo_loss(p, b, cfg)[1]
    b2 = PL.Batch(b.obs, b.actions, b.logp_old, 2 * b.advantages, b.returns)
    g2 = PL.ppo_loss(p, b2, cfg)[1]
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_clip_inactive_when_policies_match():
    p = random_params(13)
    b = random_batch(p, spread=0.0)
    loss, _, stats = PL.ppo_loss(p, b, PL.PpoConfig(value_coef=0.0))
    assert stats["policy_loss"] == pytest.approx(-b.advantages.mean(), rel=1e-12)
    assert stats["clip_fraction"] == 0.0
    assert stats["approx_kl"] == pytest.approx(0.0, abs=1e-15)


def test_empty_batch_rejected():
    p = random_params()
    b = random_batch(p)
    with pytest.raises(ValueError):
        PL.ppo_loss(p, b.subset(np.array([], dtype=int)))


def test_adam_minimizes_quadratic():
    p = PL.init_policy(RNG(0), 2, 1, 4, 1)
    target = {k: RNG(1).standard_normal(v.shape) for k, v in p.arrays.items()}
    opt = PL.Adam(p, lr=0.05)
    for _ in range(2000):
        opt.step(p, {k: p.arrays[k] - target[k] for k in p.arrays})
    for k in p.arrays:
        np.testing.assert_allclose(p.arrays[k], target[k], atol=1e-3)


def test_grad_norm_clip():
    g = {"a": np.array([3.0, 4.0])}
    clipped, norm = PL.clip_grad_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6, 0.8])


# ---------------------------------------------------------------- GAE


def test_gae_single_terminal_step():
    adv, ret = PL.gae_advantages([[1.0]], [[0.0]], [[1.0]], np.array([5.0]))
    assert adv[0, 0] == 1.0 and ret[0, 0] == 1.0


def test_gae_zero_discount():
    rng = RNG(0)
    r, v = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    adv, _ = PL.gae_advantages(r, v, np.zeros((6, 3)), rng.standard_normal(3), gamma=0.0, lam=0.9)
    np.testing.assert_allclose(adv, r - v, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.5, 1.0), st.floats(0.5, 1.0))
@hsettings(max_examples=30)
def test_gae_matches_bruteforce(seed, gamma, lam):
    rng = RNG(seed)
    T_, N = 12, 4
    r, v = rng.standard_normal((T_, N)), rng.standard_normal((T_, N))
    d = (rng.uniform(size=(T_, N)) < 0.15).astype(float)
    last = rng.standard_normal(N)
    adv, ret = PL.gae_advantages(r, v, d, last, gamma, lam)
    adv2, ret2 = gae_bruteforce(r, v, d, last, gamma, lam)
    np.testing.assert_allclose(adv, adv2, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ret, ret2, rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- blending


def blend_inputs(seed):
    rng = RNG(seed)
    rs = R.nominal_state(P)
    rs.q[3:] += rng.uniform(-0.3, 0.3, 6)
    rs.qd[3:] = rng.uniform(-2, 2, 6)
    q_set = R.nominal_pose(P)[3:] + rng.uniform(-0.2, 0.2, 6)
    qd_set = rng.uniform(-1, 1, 6)
    ff = rng.uniform(-20, 20, 6)
    tau_mpc = R.pd_torque(P, q_set, qd_set, rs.q, rs.qd, ff)
    return tau_mpc, q_set, qd_set, ff, rs


@pytest.mark.parametrize("strategy", ["joint-joint", "torque-torque"])
def test_zero_action_reproduces_mpc(strategy):
    for seed in range(50):
        tm, qs, qds, ff, rs = blend_inputs(seed)
        tau = PL.blend(tm, qs, qds, ff, np.zeros(6), rs.q, rs.qd, strategy, 0.1, P)
        np.testing.assert_array_equal(tau, tm)


def test_joint_torque_zero_action_adds_pd_to_nominal():
    tm, qs, qds, ff, rs = blend_inputs(1)
    a = P.arrays()
    big = replace(P, tau_max=(1e9,) * 6)
    tau = PL.blend(tm, qs, qds, ff, np.zeros(6), rs.q, rs.qd, "joint-torque", 0.1, big)
    want = tm + 0.1 * (a.kp * (R.nominal_pose(P)[3:] - rs.q[3:]) - a.kd * rs.qd[3:])
    np.testing.assert_allclose(tau, want, rtol=1e-14)
    assert np.any(tau != tm)


@pytest.mark.parametrize("strategy", PL.BLENDS)
def test_zero_lambda_is_pure_mpc(strategy):
    tm, qs, qds, ff, rs = blend_inputs(2)
    act = RNG(3).standard_normal(6)
    np.testing.assert_array_equal(PL.blend(tm, qs, qds, ff, act, rs.q, rs.qd, strategy, 0.0, P), tm)


@pytest.mark.parametrize("strategy", PL.BLENDS)
def test_blend_affine_in_lambda(strategy):
    big = replace(P, tau_max=(1e9,) * 6)
    tm, qs, qds, ff, rs = blend_inputs(4)
    act = RNG(5).standard_normal(6)
    t0, t1, t2 = (PL.blend(tm, qs, qds, ff, act, rs.q, rs.qd, strategy, lam, big) for lam in (0.0, 0.3, 0.6))
    np.testing.assert_allclose(t2 - t1, t1 - t0, atol=1e-10)


def test_blend_output_clamped():
    tm, qs, qds, ff, rs = blend_inputs(6)
    tau = PL.blend(tm, qs, qds, ff, np.full(6, 1e6), rs.q, rs.qd, "torque-torque", 1.0, P)
    np.testing.assert_array_equal(tau, P.arrays().tau_max)


def test_unknown_blend():
    tm, qs, qds, ff, rs = blend_inputs(0)
    with pytest.raises(ValueError):
        PL.blend(tm, qs, qds, ff, np.zeros(6), rs.q, rs.qd, "torque-joint", 0.1, P)
    with pytest.raises(ValueError):
        PL.PpoConfig(blend="nope")
    with pytest.raises(ValueError):
        PL.PpoConfig(gamma=0.0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    p = random_params(14)
    cfg = {"ppo": PL.PpoConfig().to_dict(), "seed": 3}
    path = tmp_path / "p.ckpt"
    PL.save_checkpoint(path, p, cfg, {"iterations": 5})
    q, header = PL.load_checkpoint(path, expect_hash=PL.config_hash(cfg))
    assert header["meta"] == {"iterations": 5}
    assert (q.obs_dim, q.act_dim, q.hidden, q.n_hidden) == (p.obs_dim, p.act_dim, p.hidden, p.n_hidden)
    for k in p.arrays:
        np.testing.assert_array_equal(q.arrays[k], p.arrays[k])


def test_checkpoint_errors(tmp_path):
    p = random_params(15)
    path = tmp_path / "p.ckpt"
    PL.save_checkpoint(path, p, {"a": 1})
    with pytest.raises(PL.CheckpointError):
        PL.load_checkpoint(path, expect_hash="0" * 16)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(PL.CheckpointError):
        PL.load_checkpoint(path)
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(PL.CheckpointError):
        PL.load_checkpoint(path)


# ---------------------------------------------------------------- training loop


def small_env(seed=0):
    return T.ResidualEnvs(2, seed=seed)


SMALL = PL.PpoConfig(n_steps=4, epochs=1, minibatches=2)


def test_zero_iterations_leave_params():
    p = PL.init_policy(RNG(0))
    res = T.train(T.ToyTracking(4, PL.OBS_DIM, PL.ACT_DIM), p, SMALL, 0)
    assert res.log == []
    for k in p.arrays:
        np.testing.assert_array_equal(res.params.arrays[k], p.arrays[k])


def test_first_iteration_equals_frozen_baseline():
    p = PL.init_policy(RNG(0))
    trained = T.train(small_env(), p, SMALL, 2, seed=5)
    frozen = T.train(small_env(), p, SMALL, 2, seed=5, update=False)
    strip = lambda row: {k: v for k, v in row.items() if k != "wall_time"}
    np.testing.assert_equal(strip(trained.log[0]), strip(frozen.log[0]))
    for k in p.arrays:
        np.testing.assert_array_equal(frozen.params.arrays[k], p.arrays[k])
    assert any(np.any(trained.params.arrays[k] != p.arrays[k]) for k in p.arrays)


def test_training_is_seed_deterministic(tmp_path):
    p = PL.init_policy(RNG(1))
    a = T.train(small_env(3), p, SMALL, 2, seed=3, log_path=tmp_path / "a.csv")
    b = T.train(small_env(3), p, SMALL, 2, seed=3, log_path=tmp_path / "b.csv")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    np.testing.assert_equal(strip(a.log), strip(b.log))
    header = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
    assert header == T.LOG_COLUMNS


def test_ppo_improves_toy_problem():
    env = T.ToyTracking(16, 4, 2, seed=0)
    p = PL.init_policy(RNG(0), 4, 2, 32, 2)
    res = T.train(env, p, PL.PpoConfig(n_steps=24, lr=1e-3), 50, seed=0)
    rewards = np.array([r["mean_reward"] for r in res.log])
    assert rewards[-10:].mean() > rewards[:5].mean() + 0.3


class NanEnv(T.ToyTracking):
    def step(self, actions):
        obs, r, d, info = super().step(actions)
        return obs, r * np.nan, d, info


def test_divergence_aborts_with_checkpoint(tmp_path):
    p = PL.init_policy(RNG(0), 4, 2, 8, 1)
    path = tmp_path / "last.ckpt"
    with pytest.raises(PL.TrainingDivergence) as err:
        T.train(NanEnv(4, 4, 2), p, SMALL, 3, checkpoint_path=path)
    assert err.value.params.is_finite()
    q, header = PL.load_checkpoint(path)
    assert header["meta"]["diverged"]
