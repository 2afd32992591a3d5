"""Run configuration: INI-style sections of flat key = value pairs.

Grammar (parsed with :mod:`configparser`)::

    [section]
    key = value        ; or # comments

Sections and keys are listed in ``DEFAULTS``. Any key can be overridden by an
environment variable ``PRIME_<SECTION>_<KEY>`` (upper case) and then by
``--set section.key=value`` on the command line.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "out_dir": "runs"},
    "task": {"density": "gaussians", "side": "64", "dataset_csv": ""},
    "codec": {"num_classes": "64", "length": "2"},
    "schedule": {"name": "linear"},
    "net": {"embed_dim": "48", "hidden_dim": "512", "num_layers": "4", "head": "joint",
            "zero_head": "false"},
    "train": {"batch_size": "4096", "learning_rate": "1e-3", "adam_beta1": "0.9",
              "adam_beta2": "0.999", "adam_eps": "1e-8", "steps": "2000", "t_min": "1e-4",
              "weighted_loss": "true", "carryover_in_train": "true", "dtype": "float32",
              "eval_every": "0", "eval_mc": "1024", "final_eval_mc": "4096",
              "checkpoint_every": "0"},
    "sampler": {"num_steps": "64", "cache_outputs": "true", "freeze_draws_on_idle": "false"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    parser: configparser.ConfigParser

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def int(self, section: str, key: str) -> int:
        try:
            return self.parser.getint(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def float(self, section: str, key: str) -> float:
        try:
            return self.parser.getfloat(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def bool(self, section: str, key: str) -> bool:
        try:
            return self.parser.getboolean(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.parser.set(section, key, str(value))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            self.parser.write(fh)

    def as_dict(self) -> dict:
        return {s: dict(self.parser.items(s)) for s in self.parser.sections()}

    def validate(self) -> None:
        for sec, key in [("task", "side"), ("codec", "num_classes"), ("codec", "length"),
                         ("net", "embed_dim"), ("net", "hidden_dim"), ("net", "num_layers"),
                         ("train", "batch_size"), ("sampler", "num_steps")]:
            if self.int(sec, key) < 1:
                raise ConfigError(f"[{sec}] {key} must be positive")
        if self.int("train", "steps") < 0:
            raise ConfigError("[train] steps must be >= 0")
        if not self.get("task", "dataset_csv") and \
                self.int("codec", "num_classes") != self.int("task", "side"):
            raise ConfigError("2D task needs codec.num_classes == task.side")
        if self.int("net", "embed_dim") % self.int("codec", "length"):
            raise ConfigError("net.embed_dim must be divisible by codec.length")
        if self.get("net", "head") not in ("joint", "independent"):
            raise ConfigError("net.head must be 'joint' or 'independent'")
        t_min = self.float("train", "t_min")
        if not 0 < t_min < 1:
            raise ConfigError("train.t_min must lie in (0, 1)")
        self.bool("train", "weighted_loss")
        self.bool("train", "carryover_in_train")


def _fresh() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_dict(DEFAULTS)
    return cp


def load_config(path=None, overrides=(), environ=None) -> RunConfig:
    cp = _fresh()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    cfg = RunConfig(cp)
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
    env = os.environ if environ is None else environ
    for sec, keys in DEFAULTS.items():
        for key in keys:
            name = f"PRIME_{sec}_{key}".upper()
            if name in env:
                cfg.set(sec, key, env[name])
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        cfg.set(sec.strip(), key.strip(), value.strip())
    cfg.validate()
    return cfg
