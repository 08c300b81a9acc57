"""Run configuration: YAML file, environment variables and command-line flags.

Precedence, lowest first: dataclass defaults, the YAML file, ``OCTSR_*``
environment variables, ``--section.key`` flags, and ``--seed``.  A single
top-level ``seed`` drives every random source of a run.

Environment variables name a key as ``OCTSR_<SECTION>__<KEY>`` (for example
``OCTSR_TRAIN__EPOCHS=5``) or ``OCTSR_SEED``.  Values are parsed as YAML
scalars or flow sequences, so ``[[2, 2], [4, 1]]`` works everywhere.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .mssmn import ExtractorConfig, MetaConfig
from .phantom import PhantomConfig
from .training import TrainConfig

ENV_PREFIX = "OCTSR_"

# fields that the top-level seed owns
_SEEDED = {"phantom", "train"}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    n_train: int = 48
    n_val: int = 4
    n_test: int = 12


@dataclass
class FactorConfig:
    l: float = 2.0
    m: float = 2.0
    mode: str = "center"


@dataclass
class EvalConfig:
    factors: list = field(default_factory=lambda: [[2, 2], [1, 4], [4, 1], [2.5, 2.5], [3.5, 3.5]])
    split: str = "test"
    mode: str = "center"


@dataclass
class GradcheckConfig:
    size: int = 6
    mhat: float = 2.0
    lhat: float = 2.0
    eps: float = 1e-4
    max_coords: int | None = 4
    fC: int = 4
    n_groups: int = 1
    n_blocks_per_group: int = 1
    attention_reduction: int = 2
    hidden: int = 8


SECTIONS = {
    "phantom": PhantomConfig,
    "dataset": DatasetConfig,
    "factors": FactorConfig,
    "extractor": ExtractorConfig,
    "meta": MetaConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "gradcheck": GradcheckConfig,
}


def section_keys(name):
    keys = [f.name for f in dataclasses.fields(SECTIONS[name])]
    return [k for k in keys if not (name in _SEEDED and k == "seed")]


@dataclass
class RunConfig:
    seed: int = 0
    sections: dict = field(default_factory=lambda: {name: cls() for name, cls in SECTIONS.items()})

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def seeded(self):
        """Copies of the phantom and train sections carrying the run seed."""
        return (dataclasses.replace(self.sections["phantom"], seed=self.seed),
                dataclasses.replace(self.sections["train"], seed=self.seed))

    def to_dict(self):
        out = {"seed": self.seed}
        for name, obj in self.sections.items():
            d = dataclasses.asdict(obj)
            out[name] = {k: _plain(d[k]) for k in section_keys(name)}
        return out

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def parse_value(text):
    """Parse a flag or environment value the same way YAML would."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc.problem}") from None


def _coerce(section, key, value):
    if section == "train" and key == "factor_set":
        return [tuple(f) for f in value]
    if section == "train" and key == "adam_betas":
        return tuple(value)
    if section == "phantom" and key == "layers":
        return [tuple(layer) for layer in value]
    return value


def apply(cfg: RunConfig, section, key, value, origin="config"):
    if section is None:
        if key != "seed":
            raise ConfigError(f"{origin}: unknown top-level key {key!r}")
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{origin}: seed must be an integer, got {value!r}")
        cfg.seed = value
        return
    if section not in SECTIONS:
        raise ConfigError(f"{origin}: unknown section {section!r}")
    if key not in section_keys(section):
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    setattr(cfg.sections[section], key, _coerce(section, key, value))


def load(path=None, environ=None, overrides=(), seed=None) -> RunConfig:
    """Build the effective config.  ``overrides`` holds (dotted key, raw text) pairs."""
    cfg = RunConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for name, body in data.items():
            if name == "seed":
                apply(cfg, None, "seed", body, str(path))
                continue
            if not isinstance(body, dict):
                raise ConfigError(f"{path}: section {name!r} must be a mapping")
            for key, value in body.items():
                apply(cfg, name, key, value, str(path))
    environ = os.environ if environ is None else environ
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("__")
        if not key:
            section, key = None, section
        elif section in SECTIONS:
            key = {k.lower(): k for k in section_keys(section)}.get(key, key)
        apply(cfg, section, key, parse_value(environ[var]), var)
    for dotted, raw in overrides:
        section, _, key = dotted.partition(".")
        apply(cfg, section, key, parse_value(raw), f"--{dotted}")
    if seed is not None:
        cfg.seed = seed
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    phantom, train = cfg.seeded()
    try:
        phantom.validate()
        train.validate()
        cfg.extractor.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.factors.mode not in ("center", "uniform") or cfg.eval.mode not in ("center", "uniform"):
        raise ConfigError("mode must be 'center' or 'uniform'")
    ds = cfg.dataset
    if min(ds.n_train, ds.n_val, ds.n_test) < 0:
        raise ConfigError("dataset counts must be >= 0")
