import csv

import numpy as np
import pytest

from resmpc import batch as B, mpc as M, robot as R

P = R.ModelParams()
S = M.MpcSettings()


def serial(states, cmds, gaits):
    return [M.MpcController(S, P).step(s, c, g) for s, c, g in zip(states, cmds, gaits)]


def same(a, b):
    assert a.status == b.status
    np.testing.assert_array_equal(a.z_star, b.z_star)
    np.testing.assert_array_equal(a.tau_ff, b.tau_ff)
    assert a.V_mpc == b.V_mpc or (np.isnan(a.V_mpc) and np.isnan(b.V_mpc))


def test_partition_covers_everything():
    for n in (1, 5, 64):
        for w in (1, 3, 4, 100):
            blocks = B.partition(n, w)
            assert blocks[0][0] == 0 and blocks[-1][1] == n
            assert all(a < b for a, b in blocks)
            assert all(blocks[i][1] == blocks[i + 1][0] for i in range(len(blocks) - 1))
            sizes = [b - a for a, b in blocks]
            assert max(sizes) - min(sizes) <= 1


def test_single_instance_matches_rti_step():
    states, cmds, gaits = B.random_batch(1, np.random.default_rng(0))
    with B.BatchHandle(1, S, P, workers=1) as h:
        got = B.batch_solve(h, states, cmds, gaits)[0]
    same(got, M.rti_step(states[0], cmds[0], gaits[0], S, P))


@pytest.mark.parametrize("workers", [1, 3])
def test_batch_equals_serial(workers):
    states, cmds, gaits = B.random_batch(8, np.random.default_rng(4))
    with B.BatchHandle(8, S, P, workers=workers) as h:
        got = h.solve(states, cmds, gaits)
        again = h.solve(states, cmds, gaits)  # reused workspaces
    for a, b, c in zip(got, again, serial(states, cmds, gaits)):
        same(a, c)
        same(b, c)


def test_order_does_not_matter():
    rng = np.random.default_rng(5)
    states, cmds, gaits = B.random_batch(6, rng)
    ref = serial(states, cmds, gaits)
    order = rng.permutation(6)
    ctl = M.MpcController(S, P)  # one workspace reused across instances in shuffled order
    for i in order:
        same(ctl.step(states[i], cmds[i], gaits[i]), ref[i])


def test_nan_instance_is_isolated():
    states, cmds, gaits = B.random_batch(4, np.random.default_rng(1))
    states[2].q[0] = np.nan
    with B.BatchHandle(4, S, P, workers=2) as h:
        sols = h.solve(states, cmds, gaits)
    assert [s.ok for s in sols] == [True, True, False, True]


def test_inactive_instances_skipped():
    states, cmds, gaits = B.random_batch(5, np.random.default_rng(2))
    ref = serial(states, cmds, gaits)
    with B.BatchHandle(5, S, P, workers=2) as h:
        sols = h.solve(states, cmds, gaits, active=[True, False, True, True, False])
    assert sols[1] is None and sols[4] is None
    for i in (0, 2, 3):
        same(sols[i], ref[i])


def test_length_mismatch():
    states, cmds, gaits = B.random_batch(3, np.random.default_rng(0))
    with B.BatchHandle(3, S, P, workers=1) as h:
        with pytest.raises(ValueError):
            h.solve(states[:2], cmds, gaits)
    with pytest.raises(ValueError):
        B.BatchHandle(0)


def test_benchmark_csv(tmp_path):
    path = tmp_path / "bench.csv"
    reps = B.benchmark([1, 2], repetitions=2, workers=2, csv_path=path)
    assert len(reps) == 4  # (1 worker, 2 workers) per size
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"batch_size", "workers", "stage", "mean_ms", "std_ms"}
    assert len(rows) == 4 * (len(M.STAGES) + 1)
    for rep in reps:
        assert all(v >= 0 for v in rep.stage_mean_ms.values())
        assert rep.tick_mean_ms >= max(rep.stage_mean_ms.values())
        assert rep.failures == 0
    with pytest.raises(ValueError):
        B.benchmark([0])


def test_admm_is_largest_stage():
    with B.BatchHandle(4, S, P, workers=1) as h:
        rep = B.time_batch(h, 5, np.random.default_rng(0))
    assert rep.largest_stage() == "admm", rep.stage_mean_ms
