"""Many independent MPC instances solved per control tick.

Each instance owns an :class:`~resmpc.mpc.MpcController`. With more than
one worker the instances are split into fixed contiguous blocks, one per
persistent worker process, and the controllers for a block live only in
that worker. Parallelism never changes the arithmetic of an instance, so a
batch result equals the serial loop bit for bit.
"""
from __future__ import annotations

import csv
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import robot as R
from .mpc import STAGES, MpcCommand, MpcController, MpcSettings, MpcSolution


def default_workers():
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def partition(n, workers):
    """Contiguous ``[start, stop)`` blocks, sizes differing by at most one."""
    workers = max(1, min(workers, n))
    edges = np.linspace(0, n, workers + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def _solve_block(controllers, states, cmds, gaits, prevs, active):
    return [c.step(s, cmd, g, p) if on else None
            for c, s, cmd, g, p, on in zip(controllers, states, cmds, gaits, prevs, active)]


def _worker_main(conn, n, settings, model):
    controllers = [MpcController(settings, model) for _ in range(n)]
    while True:
        msg = conn.recv()
        if msg is None:
            break
        try:
            conn.send(("ok", _solve_block(controllers, *msg)))
        except Exception as exc:  # pragma: no cover - reported to the parent
            conn.send(("error", repr(exc)))
    conn.close()


class BatchHandle:
    """Workspaces for ``n_envs`` MPC instances sharing settings and model."""

    def __init__(self, n_envs: int, settings: MpcSettings = MpcSettings(),
                 model: R.ModelParams = R.ModelParams(), workers: int | None = None):
        if n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        self.n_envs = int(n_envs)
        self.settings = settings
        self.model = model
        self.workers = min(self.n_envs, workers or default_workers())
        self.blocks = partition(self.n_envs, self.workers)
        self._procs = []
        self._conns = []
        self.controllers = None
        if self.workers == 1:
            self.controllers = [MpcController(settings, model) for _ in range(self.n_envs)]
        else:
            ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
            for a, b in self.blocks:
                parent, child = ctx.Pipe()
                p = ctx.Process(target=_worker_main, args=(child, b - a, settings, model),
                                daemon=True)
                p.start()
                child.close()
                self._procs.append(p)
                self._conns.append(parent)

    def solve(self, states, cmds, gaits, prevs=None, active=None) -> list[MpcSolution]:
        """One tick for every instance; entries with ``active`` false come back ``None``."""
        n = self.n_envs
        if prevs is None:
            prevs = [None] * n
        if active is None:
            active = [True] * n
        if not len(states) == len(cmds) == len(gaits) == len(prevs) == len(active) == n:
            raise ValueError(f"batch inputs must all have length n_envs={n}")
        active = [bool(a) for a in active]
        if self.controllers is not None:
            return _solve_block(self.controllers, states, cmds, gaits, prevs, active)
        for conn, (a, b) in zip(self._conns, self.blocks):
            conn.send((states[a:b], cmds[a:b], gaits[a:b], prevs[a:b], active[a:b]))
        out = []
        for conn in self._conns:
            status, payload = conn.recv()
            if status != "ok":
                raise RuntimeError(f"batch worker failed: {payload}")
            out.extend(payload)
        return out

    def close(self):
        for conn in self._conns:
            try:
                conn.send(None)
                conn.close()
            except (BrokenPipeError, OSError):
                pass
        for p in self._procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
        self._procs, self._conns = [], []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        if getattr(self, "_procs", None):
            self.close()


def batch_solve(handle: BatchHandle, states, cmds, gaits, prevs=None, active=None):
    return handle.solve(states, cmds, gaits, prevs, active)


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


@dataclass
class TimingReport:
    batch_size: int
    workers: int
    stage_mean_ms: dict
    stage_std_ms: dict
    tick_mean_ms: float
    tick_std_ms: float
    failures: int = 0
    extra: dict = field(default_factory=dict)

    def rows(self):
        out = [(self.batch_size, self.workers, s, self.stage_mean_ms[s], self.stage_std_ms[s])
               for s in STAGES]
        out.append((self.batch_size, self.workers, "total", self.tick_mean_ms, self.tick_std_ms))
        return out

    def largest_stage(self):
        return max(STAGES, key=self.stage_mean_ms.__getitem__)


def random_batch(n, rng, model=R.ModelParams(), settings=MpcSettings(), v_max=0.5):
    """Nominal poses with random base velocities, commands and gait phases."""
    states, cmds, gaits = [], [], []
    for _ in range(n):
        s = R.nominal_state(model)
        r, ang = v_max * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
        s.qd[0], s.qd[1] = r * np.cos(ang), r * np.sin(ang)
        s.qd[2] = rng.uniform(-0.3, 0.3)
        states.append(s)
        cmds.append(MpcCommand.standing(model, float(rng.uniform(0.0, 0.5))))
        gaits.append(settings.gait(float(rng.uniform())))
    return states, cmds, gaits


def time_batch(handle: BatchHandle, repetitions, rng):
    states, cmds, gaits = random_batch(handle.n_envs, rng, handle.model, handle.settings)
    handle.solve(states, cmds, gaits)  # warm-up: symbolic factorization, worker start
    samples = {s: [] for s in STAGES}
    ticks = []
    failures = 0
    for _ in range(repetitions):
        t0 = time.perf_counter()
        sols = handle.solve(states, cmds, gaits)
        ticks.append(time.perf_counter() - t0)
        for sol in sols:
            failures += not sol.ok
            for s in STAGES:
                samples[s].append(sol.timings.get(s, 0.0))
    ms = lambda v: 1e3 * np.asarray(v)
    return TimingReport(
        handle.n_envs, handle.workers,
        {s: float(ms(v).mean()) for s, v in samples.items()},
        {s: float(ms(v).std()) for s, v in samples.items()},
        float(ms(ticks).mean()), float(ms(ticks).std()), failures)


def benchmark(batch_sizes, repetitions=5, workers=None, settings=MpcSettings(),
              model=R.ModelParams(), seed=0, csv_path=None):
    """Per-stage timings for each batch size, single worker and ``workers``.

    Returns one report per (batch size, worker count); the single-worker
    baseline is always included so speedups can be read off the CSV.
    """
    if not batch_sizes or min(batch_sizes) < 1:
        raise ValueError("batch sizes must be >= 1")
    workers = workers or default_workers()
    counts = sorted({1, int(workers)})
    reports = []
    for n in batch_sizes:
        for w in counts:
            with BatchHandle(n, settings, model, w) as h:
                reports.append(time_batch(h, repetitions, np.random.default_rng(seed)))
    if csv_path is not None:
        write_timing_csv(reports, csv_path)
    return reports


def write_timing_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_size", "workers", "stage", "mean_ms", "std_ms"])
        for rep in reports:
            for row in rep.rows():
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6f}", f"{row[4]:.6f}"])


def speedup(reports, batch_size):
    """Wall-time ratio single-worker / most-workers at ``batch_size``."""
    rows = sorted((r for r in reports if r.batch_size == batch_size), key=lambda r: r.workers)
    if len(rows) < 2:
        return 1.0
    return rows[0].tick_mean_ms / rows[-1].tick_mean_ms
