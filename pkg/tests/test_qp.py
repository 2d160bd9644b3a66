import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resmpc.qp import (INF, AdmmSettings, DivergenceError, QpProblem, QpSolver,
                       admm_solve, assemble_kkt, dump_problem, kkt_rhs,
                       load_problem, qp_value, scale_problem, unscale_solution)
from resmpc.sparse_linalg import SingularMatrixError, dense_to_csc

from oracles import active_set_oracle, random_qp, to_problem

# settings for the oracle comparisons: equilibrated, stiffer penalty
ORACLE = AdmmSettings(n_iters=2000, rho=3.0, scaling_iters=10)


def test_kkt_scalar():
    K = assemble_kkt(dense_to_csc([[1.0]], upper=True), dense_to_csc([[1.0]]), 1.0, 1.0)
    np.testing.assert_array_equal(K.sym_to_dense(), [[2.0, 1.0], [1.0, -1.0]])


def test_kkt_zero_cost_identity_constraints():
    P = dense_to_csc(np.zeros((2, 2)), upper=True)
    K = assemble_kkt(P, dense_to_csc(np.eye(2)), 1e-6, 0.1)
    expect = np.block([[1e-6 * np.eye(2), np.eye(2)], [np.eye(2), -10.0 * np.eye(2)]])
    np.testing.assert_allclose(K.sym_to_dense(), expect, rtol=1e-15)


def test_kkt_pattern_matches_dense_union():
    rng = np.random.default_rng(0)
    n, m = 60, 45
    Pd = np.diag(rng.random(n)) + np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.05))
    Ad = rng.standard_normal((m, n)) * (rng.random((m, n)) < 0.1)
    K = assemble_kkt(dense_to_csc(Pd, upper=True), dense_to_csc(Ad), 1e-6, 0.1)
    mask = np.zeros((n + m, n + m), dtype=bool)
    mask[:n, :n] = np.triu(Pd != 0) | np.eye(n, dtype=bool)
    mask[:n, n:] = Ad.T != 0
    mask[n:, n:] = np.eye(m, dtype=bool)
    got = np.zeros_like(mask)
    r, c, _ = K.to_triplets()
    got[r, c] = True
    assert np.array_equal(got, mask)
    K.check()


def test_kkt_dimension_mismatch():
    with pytest.raises(ValueError):
        assemble_kkt(dense_to_csc(np.eye(2), upper=True), dense_to_csc(np.ones((1, 3))), 1, 1)


def test_kkt_rhs():
    assert np.array_equal(kkt_rhs(np.zeros(2), np.zeros(1), np.zeros(1), np.zeros(2), 1, 1),
                          np.zeros(3))
    np.testing.assert_array_equal(kkt_rhs([1.0], [2.0], [3.0], [0.0], 1.0, 1.0), [1.0, -1.0])
    rng = np.random.default_rng(1)
    x, q, z, y = (rng.standard_normal(k) for k in (4, 4, 3, 3))
    np.testing.assert_allclose(kkt_rhs(x, z, y, q, 0.3, 2.0),
                               np.concatenate([0.3 * x - q, z - y / 2.0]))
    with pytest.raises(ValueError):
        kkt_rhs(x, z, y, q[:2], 1, 1)


def test_qp_value():
    pr = to_problem(np.eye(2), np.zeros(2), np.zeros((1, 2)), [-1.0], [1.0])
    assert qp_value(pr, np.zeros(2)) == 0.0
    assert qp_value(pr, np.ones(2)) == 1.0
    rng = np.random.default_rng(2)
    P, q, A, lo, hi = random_qp(rng, 6, 4)
    x = rng.standard_normal(6)
    assert qp_value(to_problem(P, q, A, lo, hi), x) == pytest.approx(0.5 * x @ P @ x + q @ x, rel=1e-12)


def test_lower_bound_scalar():
    pr = to_problem(np.eye(1), [0.0], np.eye(1), [1.0], [np.inf])
    sol = admm_solve(pr, AdmmSettings(n_iters=200))
    assert abs(sol.x[0] - 1.0) <= 1e-4


def test_unconstrained():
    q = np.array([1.0, -2.0, 0.5])
    pr = to_problem(np.eye(3), q, np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    sol = admm_solve(pr, AdmmSettings(n_iters=100))
    np.testing.assert_allclose(sol.x, -q, atol=1e-6)


def _oracle_cases(count, seed=0):
    rng = np.random.default_rng(seed)
    while count:
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        data = random_qp(rng, n, m)
        x_star = active_set_oracle(*data)
        if x_star is None:
            continue
        count -= 1
        yield data, x_star


@pytest.mark.parametrize("case", range(40))
def test_matches_active_set_oracle(case):
    data, x_star = list(_oracle_cases(case + 1, seed=100))[-1]
    sol = admm_solve(to_problem(*data), ORACLE)
    assert np.abs(sol.x - x_star).max() <= 1e-4


def test_residual_shrinks():
    for data, _ in _oracle_cases(20, seed=5):
        pr = to_problem(*data)
        early = admm_solve(pr, AdmmSettings(n_iters=10, rho=3.0, scaling_iters=10))
        late = admm_solve(pr, ORACLE)
        assert late.prim_res <= early.prim_res


def test_warm_start_consistency():
    for data, _ in _oracle_cases(10, seed=9):
        pr, _ = scale_problem(to_problem(*data))
        tight = AdmmSettings(n_iters=200000, rho=3.0, eps_abs=1e-13)
        sol = QpSolver(pr, tight).solve()
        steps = []
        solver = QpSolver(pr, AdmmSettings(n_iters=20, rho=3.0))
        solver.warm_start(sol.x, sol.y)
        prev = solver.x.copy()

        def hook(it, x, z, y):
            steps.append(np.abs(x - prev).max())
            prev[:] = x

        solver.solve(callback=hook)
        assert max(steps) <= 1e-9


def test_projection_safety_hook():
    for data, _ in _oracle_cases(10, seed=3):
        pr = to_problem(*data)
        seen = []

        def hook(it, x, z, y):
            seen.append(it)
            assert np.all(z >= pr.lo - 1e-6) and np.all(z <= pr.hi + 1e-6)

        admm_solve(pr, AdmmSettings(n_iters=50), callback=hook)
        assert seen == list(range(50))


def test_solution_box_membership():
    for data, _ in _oracle_cases(10, seed=4):
        pr = to_problem(*data)
        sol = admm_solve(pr, AdmmSettings(n_iters=7))
        assert np.all(sol.z_con >= pr.lo - 1e-6) and np.all(sol.z_con <= pr.hi + 1e-6)


def test_scaling_recovery():
    for data, _ in _oracle_cases(15, seed=21):
        pr = to_problem(*data)
        st_ = AdmmSettings(n_iters=100000, rho=3.0, eps_abs=1e-12)
        plain = admm_solve(pr, st_)
        scaled, sc = scale_problem(pr)
        back = unscale_solution(admm_solve(scaled, st_), sc, pr)
        assert np.abs(plain.x - back.x).max() <= 1e-6


def test_determinism():
    data, _ = next(_oracle_cases(1, seed=8))
    pr = to_problem(*data)
    a = admm_solve(pr, AdmmSettings(n_iters=33))
    b = admm_solve(pr, AdmmSettings(n_iters=33))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_tolerance_exit():
    data, x_star = next(_oracle_cases(1, seed=12))
    sol = admm_solve(to_problem(*data), AdmmSettings(n_iters=100000, rho=3.0, eps_abs=1e-10))
    assert sol.iterations < 100000
    assert np.abs(sol.x - x_star).max() <= 1e-6


def test_divergence_reports_iteration():
    pr = to_problem(np.eye(2), [np.nan, 0.0], np.eye(2), [-1.0, -1.0], [1.0, 1.0])
    with pytest.raises(DivergenceError) as err:
        admm_solve(pr, AdmmSettings(n_iters=10))
    assert err.value.iteration == 0


def test_singular_kkt_propagates():
    pr = to_problem(np.eye(1), [0.0], np.eye(1), [0.0], [1.0])
    # σ so small that 1 + σ loses it entirely is still fine; force a zero pivot
    pr.P.values[:] = -1e-6
    with pytest.raises(SingularMatrixError):
        admm_solve(pr, AdmmSettings(sigma=1e-6, rho=0.1))


def test_scaled_warm_start_is_mapped():
    data, _ = next(_oracle_cases(1, seed=31))
    pr = to_problem(*data)
    sol = admm_solve(pr, AdmmSettings(n_iters=50000, rho=3.0, scaling_iters=10, eps_abs=1e-13))
    again = admm_solve(pr, AdmmSettings(n_iters=5, rho=3.0, scaling_iters=10), warm=(sol.x, sol.y))
    assert np.abs(again.x - sol.x).max() <= 1e-9


def test_warm_dimension_mismatch():
    pr = to_problem(np.eye(2), [0.0, 0.0], np.eye(2), [-1, -1], [1, 1])
    with pytest.raises(ValueError):
        admm_solve(pr, warm=(np.zeros(3), np.zeros(2)))


def test_settings_validation():
    for kw in ({"sigma": 0}, {"rho": -1}, {"over_relax": 2.0}, {"n_iters": 0},
               {"scaling_iters": -1}):
        with pytest.raises(ValueError):
            AdmmSettings(**kw)


def test_invalid_bounds():
    with pytest.raises(ValueError):
        to_problem(np.eye(1), [0.0], np.eye(1), [1.0], [0.0]).validate()


def test_dump_load_roundtrip(tmp_path):
    data, _ = next(_oracle_cases(1, seed=2))
    pr = to_problem(*data)
    dump_problem(tmp_path / "p.qp", pr)
    back = load_problem(tmp_path / "p.qp")
    np.testing.assert_array_equal(back.P.sym_to_dense(), pr.P.sym_to_dense())
    np.testing.assert_array_equal(back.A.to_dense(), pr.A.to_dense())
    for a, b in ((back.q_lin, pr.q_lin), (back.lo, pr.lo), (back.hi, pr.hi)):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_property_oracle(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    data = random_qp(rng, n, m)
    x_star = active_set_oracle(*data)
    if x_star is None:
        return
    sol = admm_solve(to_problem(*data), ORACLE)
    assert np.abs(sol.x - x_star).max() <= 1e-4
