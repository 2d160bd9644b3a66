"""Experiment dispatch, output files and run manifests.

Each experiment takes an :class:`~resmpc.config.ExperimentConfig` and an
output directory, writes its CSVs there and returns their names.
:func:`run` adds ``config.cfg`` (the effective configuration) and
``manifest.json`` (config hash, seeds, code version, output digests) so
``resmpc run <out>/config.cfg`` repeats the experiment.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as A
from . import batch as B
from . import policy as PL
from ._backend import BACKEND
from .config import ExperimentConfig
from .logio import TrajectoryWriter, read_log
from .mpc import MpcCommand

log = logging.getLogger("resmpc")


class ExperimentError(RuntimeError):
    pass


def _grid(v):
    return [float(x) for x in (v if isinstance(v, (list, tuple)) else [v])]


def load_policy(path, ppo: PL.PpoConfig | None = None):
    """Parameters plus the PPO config they were trained with."""
    if not path:
        raise ExperimentError("this experiment needs a trained checkpoint (checkpoint = ...)")
    if not Path(path).exists():
        raise ExperimentError(f"checkpoint not found: {path}")
    params, header = PL.load_checkpoint(path)
    stored = header.get("config", {}).get("ppo")
    if stored:
        ppo = PL.PpoConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in stored.items()})
    return params, ppo or PL.PpoConfig()


def _sweep_nqp(cfg: ExperimentConfig, out: Path):
    a = cfg.args
    grid = [int(x) for x in _grid(a.get("grid", (1, 5, 10, 25, 50)))]
    model = cfg.model
    env = A.disturbance_config(cfg.env, model)
    rows = A.sweep_qp_iterations(grid, int(a.get("trials", 100)), cfg.seed,
                                 float(a.get("duration", 5.0)), env, cfg.mpc, model, cfg.threads)
    A.write_rows(rows, out / "sweep_nqp.csv", A.SurvivalRow)
    return ["sweep_nqp.csv"]


def _velocity_boundary(cfg: ExperimentConfig, out: Path):
    a = cfg.args
    which = str(a.get("controller", "mpc"))
    controllers = ["mpc", "residual"] if which == "both" else [which]
    if any(c not in ("mpc", "residual") for c in controllers):
        raise ExperimentError(f"unknown controller {which!r}")
    grid = _grid(a.get("grid", tuple(np.round(np.arange(-1.0, 1.01, 0.1), 2))))
    params, ppo = None, cfg.ppo
    if "residual" in controllers:
        params, ppo = load_policy(a.get("checkpoint"), ppo)
    names = []
    for c in controllers:
        rows = A.velocity_boundary(c, grid, int(a.get("n_seeds", 3)), cfg.seed,
                                   float(a.get("duration", 8.0)), float(a.get("window", 5.0)),
                                   cfg.env, cfg.mpc, cfg.model, params, ppo, cfg.threads)
        name = f"velocity_boundary_{c}.csv"
        A.write_rows(rows, out / name, A.BoundaryRow)
        names.append(name)
    return names


def record_rollout(path, controller, n_runs, seed, duration, cmd_vx, cfg: ExperimentConfig,
                   params=None, ppo=None):
    model = cfg.model
    meta = {"controller": controller, "seed": seed, "cmd_vx": cmd_vx, "duration": duration}
    with TrajectoryWriter(path, meta=meta) as w:
        A.evaluate(controller, n_runs, seed, duration, cfg.env, cfg.mpc, model, params,
                   ppo or cfg.ppo, MpcCommand.standing(model, cmd_vx), workers=cfg.threads, log=w)


def _residual_metrics(cfg: ExperimentConfig, out: Path):
    a = cfg.args
    names = []
    src = a.get("log")
    if not src:
        params, ppo = load_policy(a.get("checkpoint"), cfg.ppo)
        src = out / "rollout.rlog"
        record_rollout(src, "residual", int(a.get("n_runs", 4)), cfg.seed,
                       float(a.get("duration", 5.0)), float(a.get("cmd_vx", 0.5)), cfg,
                       params, ppo)
        names.append("rollout.rlog")
    rows = A.residual_metrics(read_log(src), int(a.get("bins", 50)))
    A.write_rows(rows, out / "residual_metrics.csv", A.PhaseMetricRow)
    return names + ["residual_metrics.csv"]


def _gait_study(cfg: ExperimentConfig, out: Path):
    a = cfg.args
    params, ppo = load_policy(a.get("checkpoint"), cfg.ppo)
    rows = A.gait_modification_study(params, _grid(a.get("switches", (0.5, 0.65, 0.35))),
                                     int(a.get("n_runs", 8)), cfg.seed,
                                     float(a.get("duration", 5.0)), float(a.get("cmd_vx", 0.25)),
                                     cfg.env, cfg.mpc, cfg.model, ppo, workers=cfg.threads)
    A.write_rows(rows, out / "gait_study.csv", A.StudyRow)
    return ["gait_study.csv"]


def _terrain_study(cfg: ExperimentConfig, out: Path):
    a = cfg.args
    params, ppo = load_policy(a.get("checkpoint"), cfg.ppo)
    rows = A.terrain_study(params, float(a.get("amplitude", 0.04)),
                           _grid(a.get("swing_heights", (0.075, 0.15))), int(a.get("n_runs", 8)),
                           cfg.seed, float(a.get("duration", 5.0)), float(a.get("cmd_vx", 0.25)),
                           cfg.env, cfg.mpc, cfg.model, ppo, workers=cfg.threads)
    A.write_rows(rows, out / "terrain_study.csv", A.StudyRow)
    return ["terrain_study.csv"]


def _benchmark(cfg: ExperimentConfig, out: Path):
    a = cfg.args
    sizes = [int(x) for x in _grid(a.get("sizes", (1, 16, 64, 256)))]
    reports = B.benchmark(sizes, int(a.get("repetitions", 5)), int(a.get("workers", 4)),
                          cfg.mpc, cfg.model, cfg.seed, out / "benchmark.csv")
    for size in sizes:
        log.info("batch %d: speedup %.2fx", size, B.speedup(reports, size))
    return ["benchmark.csv"]


def _train(cfg: ExperimentConfig, out: Path):
    from .training import ResidualEnvs, train, training_config

    a = cfg.args
    n_iters, n_envs = int(a.get("iterations", 300)), int(a.get("n_envs", 32))
    env_cfg, settings, model, ppo = cfg.env, cfg.mpc, cfg.model, cfg.ppo

    def progress(row, stats):
        log.info("iter %d  reward %.4f", row["iteration"], row["mean_reward"])

    if a.get("compare_baseline", False):
        seeds = [int(s) for s in _grid(a.get("seeds", (cfg.seed,)))]
        rows = A.warm_start_study(seeds, out, n_iters, n_envs, int(a.get("tail", 20)), env_cfg,
                                  settings, model, ppo, cfg.threads, progress)
        with open(out / "warm_start.csv", "w") as fh:
            fh.write("seed,reward0_residual,reward0_baseline,tail_residual,tail_baseline,margin\n")
            for r in rows:
                fh.write(",".join([str(r.seed)] + [repr(float(v)) for v in (
                    r.reward0_residual, r.reward0_baseline, r.tail_residual, r.tail_baseline,
                    r.margin)]) + "\n")
        log.info("sign test p = %.4f", A.sign_test([r.margin for r in rows]))
        return (["warm_start.csv"] + [f"{k}_s{s}.csv" for s in seeds for k in ("train", "baseline")]
                + [f"policy_s{s}.ckpt" for s in seeds])
    env = ResidualEnvs(n_envs, env_cfg, settings, model, ppo, seed=cfg.seed, workers=cfg.threads)
    try:
        params = PL.init_policy(np.random.default_rng(cfg.seed), PL.OBS_DIM, PL.ACT_DIM,
                                ppo.hidden, ppo.n_hidden, ppo.init_log_std)
        train(env, params, ppo, n_iters, cfg.seed, update=not a.get("baseline", False),
              log_path=out / "train_log.csv", checkpoint_path=out / "policy.ckpt",
              checkpoint_config=training_config(env_cfg, settings, model, ppo, cfg.seed),
              progress=progress)
    finally:
        env.close()
    return ["train_log.csv", "policy.ckpt"]


EXPERIMENTS = {
    "sweep-nqp": _sweep_nqp,
    "velocity-boundary": _velocity_boundary,
    "residual-metrics": _residual_metrics,
    "gait-study": _gait_study,
    "terrain-study": _terrain_study,
    "benchmark": _benchmark,
    "train": _train,
}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version():
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(["git", "-C", str(here), "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = None
    return {"version": __version__, "git": rev, "backend": BACKEND}


def run(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Run ``cfg.name`` and write outputs plus manifest; returns the output dir."""
    if cfg.name not in EXPERIMENTS:
        raise ExperimentError(f"unknown experiment {cfg.name!r}; choose from "
                              + ", ".join(sorted(EXPERIMENTS)))
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExperimentError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ExperimentError(f"output directory {out} is not writable")
    (out / "config.cfg").write_text(cfg.dumps())
    outputs = EXPERIMENTS[cfg.name](cfg, out)
    manifest = {
        "experiment": cfg.name,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "code": code_version(),
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
