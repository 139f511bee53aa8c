"""Run configuration: one INI file with a section per component.

Sections: [run], [synth], [transformer], [train], [experiment], [fusion],
[paths]. Unknown sections or keys are configuration errors. A global seed in
[run] (or ``--seed``) fills every section seed that is not set explicitly.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .errors import ConfigError
from .evalstat import ExperimentConfig
from .fusion import FusionSpec
from .maskhit import TransformerConfig
from .synthcohort import SynthConfig
from .training import TrainConfig

SECTIONS = {
    "synth": SynthConfig,
    "transformer": TransformerConfig,
    "train": TrainConfig,
    "experiment": ExperimentConfig,
    "fusion": FusionSpec,
}
SEEDED = ("synth", "train", "experiment", "fusion")
RUN_KEYS = {"seed": 0, "featurizer_seed": 0}
PATH_KEYS = ("cohort", "checkpoint", "pretrained", "finetuned", "run")


def _convert(raw: str, default, name):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace("x", ",").split(","))
        if default is None:
            return None if text.lower() in ("", "none") else float(text)
        return text
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


@dataclass
class RunConfig:
    seed: int = 0
    featurizer_seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    paths: dict = field(default_factory=dict)

    def dumps(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed), "featurizer_seed": str(self.featurizer_seed)}
        for name in SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if self.paths:
            cp["paths"] = {k: str(v) for k, v in sorted(self.paths.items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def load_config(text="", seed=None, overrides=()):
    """Parse INI text, apply ``section.key=value`` overrides and the global seed."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, opt = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][opt] = value
    unknown = set(cp.sections()) - set(SECTIONS) - {"run", "paths"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; valid: run, paths, {', '.join(SECTIONS)}")

    run = dict(RUN_KEYS)
    if cp.has_section("run"):
        for k, v in cp["run"].items():
            if k not in RUN_KEYS:
                raise ConfigError(f"unknown key run.{k}")
            run[k] = _convert(v, 0, f"run.{k}")
    if seed is not None:
        run["seed"] = int(seed)

    built = {}
    for name, cls in SECTIONS.items():
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        values = {}
        if cp.has_section(name):
            for k, v in cp[name].items():
                if k not in defaults:
                    raise ConfigError(f"unknown key {name}.{k}; valid: {', '.join(defaults)}")
                values[k] = _convert(v, defaults[k], f"{name}.{k}")
        if name in SEEDED and "seed" not in values:
            values["seed"] = run["seed"]
        if name == "fusion" and values.get("weight") is not None and "method" not in values:
            values["method"] = "decision_weighted"
        try:
            built[name] = cls(**values)
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    paths = {}
    if cp.has_section("paths"):
        for k, v in cp["paths"].items():
            if k not in PATH_KEYS:
                raise ConfigError(f"unknown key paths.{k}; valid: {', '.join(PATH_KEYS)}")
            paths[k] = v
    return RunConfig(run["seed"], run["featurizer_seed"], paths=paths, **built)
