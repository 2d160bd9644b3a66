"""Command-line entry point: ``resmpc <command> [options]``.

Every command can start from a config file (``--config``); command-line
options override its values. Outputs land in ``--out-dir`` together with
the effective ``config.cfg`` and a ``manifest.json``.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import config as C
from . import experiments as E
from .logio import LogFormatError
from .policy import CheckpointError


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _globals(p):
    # SUPPRESS keeps a subcommand's unset flag from clobbering a global one
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="experiment seed")
    p.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker processes for batched MPC solves")


def build_parser():
    p = argparse.ArgumentParser(prog="resmpc", description="Planar biped MPC with a learned "
                                "torque residual: training, experiments and benchmarks.")
    _globals(p)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the experiment named in a config file")
    r.add_argument("config")
    _globals(r)

    def cmd(name, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", help="start from this config file")
        _globals(s)
        return s

    s = cmd("sweep-nqp", "MPC survival versus ADMM iterations")
    s.add_argument("--grid", type=_ints)
    s.add_argument("--trials", type=int)
    s.add_argument("--duration", type=float)

    s = cmd("velocity-boundary", "achieved forward-velocity commands")
    s.add_argument("--controller", choices=("mpc", "residual", "both"))
    s.add_argument("--checkpoint")
    s.add_argument("--grid", type=_floats)
    s.add_argument("--n-seeds", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--window", type=float)

    s = cmd("residual-metrics", "residual/MPC torque ratio and cosine per phase bin")
    s.add_argument("--log", help="recorded binary log; otherwise a rollout is recorded")
    s.add_argument("--checkpoint")
    s.add_argument("--bins", type=int)
    s.add_argument("--n-runs", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--cmd-vx", type=float)

    s = cmd("gait-study", "stance-fraction changes after training")
    s.add_argument("--checkpoint")
    s.add_argument("--switches", type=_floats)
    s.add_argument("--n-runs", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--cmd-vx", type=float)

    s = cmd("terrain-study", "rough terrain and swing-height retuning")
    s.add_argument("--checkpoint")
    s.add_argument("--amplitude", type=float)
    s.add_argument("--swing-heights", type=_floats)
    s.add_argument("--n-runs", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--cmd-vx", type=float)

    s = cmd("benchmark", "per-stage batch timing, one worker versus several")
    s.add_argument("--sizes", type=_ints)
    s.add_argument("--repetitions", type=int)
    s.add_argument("--workers", type=int)

    s = cmd("train", "train the residual policy with PPO")
    s.add_argument("--iterations", type=int)
    s.add_argument("--n-envs", type=int)
    s.add_argument("--baseline", action="store_true", default=None,
                   help="keep the zero residual fixed (no updates)")
    s.add_argument("--compare-baseline", action="store_true", default=None,
                   help="train and run the fixed baseline for each of --seeds")
    s.add_argument("--seeds", type=_ints)
    return p


_NOT_ARGS = {"command", "config", "seed", "out_dir", "threads", "verbose"}


def config_from_args(ns) -> C.ExperimentConfig:
    if ns.command == "run":
        cfg = C.load(ns.config)
    else:
        cfg = C.load(ns.config) if ns.config else C.ExperimentConfig()
        if cfg.name and cfg.name != ns.command:
            cfg.args = {}
        cfg.name = ns.command
        cfg = cfg.with_args(**{k: v for k, v in vars(ns).items() if k not in _NOT_ARGS})
    for key in ("seed", "out_dir", "threads"):
        if hasattr(ns, key):
            setattr(cfg, key, getattr(ns, key))
    if cfg.threads < 1:
        raise C.ConfigError("--threads must be >= 1")
    return cfg


def main(argv=None):
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(ns)
        out = E.run(cfg)
    except (C.ConfigError, E.ExperimentError, CheckpointError, LogFormatError,
            FileNotFoundError, ValueError) as exc:
        print(f"resmpc: error: {exc}", file=sys.stderr)
        return 2
    print(out / "manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
