"""INI experiment configuration.

One file drives every command::

    [experiment]
    name = sweep-nqp        ; which experiment ``run`` dispatches to
    seed = 0
    out_dir = out/sweep
    threads = 1

    [sweep-nqp]             ; arguments of the named experiment
    grid = 1, 5, 10, 25, 50
    trials = 100

    [env]                   ; EnvConfig overrides
    [mpc]                   ; MpcSettings overrides
    [model]                 ; ModelParams overrides
    [ppo]                   ; PpoConfig overrides

Values are Python literals (numbers, tuples, ``None``, ``true``/``false``);
anything that does not parse as one is kept as a string.
"""
from __future__ import annotations

import ast
import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field, fields, replace

from .mpc import MpcSettings
from .policy import PpoConfig
from .robot import ModelParams
from .sim import EnvConfig

PARAM_SECTIONS = {"env": EnvConfig, "mpc": MpcSettings, "model": ModelParams, "ppo": PpoConfig}


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low == "none":
        return None
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(format_value(x) for x in v) + ("," if len(v) == 1 else "")
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class ExperimentConfig:
    name: str = ""
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1
    args: dict = field(default_factory=dict)
    sections: dict = field(default_factory=lambda: {k: {} for k in PARAM_SECTIONS})

    def _build(self, key):
        cls = PARAM_SECTIONS[key]
        known = {f.name for f in fields(cls)}
        extra = set(self.sections.get(key, {})) - known
        if extra:
            raise ConfigError(f"unknown key(s) in [{key}]: {', '.join(sorted(extra))}")
        try:
            return cls(**self.sections.get(key, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{key}]: {exc}") from exc

    @property
    def env(self) -> EnvConfig:
        return self._build("env")

    @property
    def mpc(self) -> MpcSettings:
        return self._build("mpc")

    @property
    def model(self) -> ModelParams:
        return self._build("model")

    @property
    def ppo(self) -> PpoConfig:
        return self._build("ppo")

    def validate(self):
        for key in PARAM_SECTIONS:
            self._build(key)
        return self

    def with_args(self, **kw):
        """Copy with experiment arguments overridden (``None`` values ignored)."""
        args = dict(self.args)
        args.update({k: v for k, v in kw.items() if v is not None})
        return replace(self, args=args, sections={k: dict(v) for k, v in self.sections.items()})

    def to_dict(self):
        return {"experiment": {"name": self.name, "seed": self.seed, "out_dir": self.out_dir,
                               "threads": self.threads},
                "args": dict(sorted(self.args.items())),
                **{k: dict(sorted(self.sections.get(k, {}).items())) for k in PARAM_SECTIONS}}

    def hash(self) -> str:
        """Digest of everything that affects results (``out_dir`` and ``threads`` excluded)."""
        d = self.to_dict()
        d["experiment"] = {"name": self.name, "seed": self.seed}
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["experiment"] = {"name": self.name, "seed": str(self.seed), "out_dir": self.out_dir,
                            "threads": str(self.threads)}
        if self.name:
            cp[self.name] = {k: format_value(v) for k, v in sorted(self.args.items())}
        for key in PARAM_SECTIONS:
            vals = self.sections.get(key, {})
            if vals:
                cp[key] = {k: format_value(v) for k, v in sorted(vals.items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    exp = {k: parse_value(v) for k, v in cp["experiment"].items()} if "experiment" in cp else {}
    unknown = set(exp) - {"name", "seed", "out_dir", "threads"}
    if unknown:
        raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(sorted(unknown))}")
    cfg = ExperimentConfig(name=str(exp.get("name", "")), seed=int(exp.get("seed", 0)),
                           out_dir=str(exp.get("out_dir", "out")),
                           threads=int(exp.get("threads", 1)))
    for sec in cp.sections():
        vals = {k: parse_value(v) for k, v in cp[sec].items()}
        if sec in PARAM_SECTIONS:
            cfg.sections[sec] = vals
        elif sec == cfg.name:
            cfg.args = vals
        elif sec != "experiment":
            raise ConfigError(f"unexpected section [{sec}]")
    return cfg.validate()


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())
