"""Experiment configuration: a YAML key-value tree with strict key checking.

Example::

    env:
      name: point_circle
      params: {d: 5.0, x_lim: 2.5}
    algo:
      algo: SPACE
      delta: 1.0e-4
      h_c: 5.0
      h_d0: 5.0
      n_iters: 150
      batch_steps: 4000
    baseline:
      kind: pretrain            # none | checkpoint | pretrain | handcrafted
      recipe: {variant: near, iters: 150}
    output:
      dir: runs/pc_space
      checkpoint_every: 50
    seeds: [0, 1, 2, 3, 4]
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .algorithms import AlgoConfig
from .envs import make_env
from .errors import ConfigError

BASELINE_KINDS = ("none", "checkpoint", "pretrain", "handcrafted")
VARIANTS = ("cost", "reward", "near")
HANDCRAFTED = ("zero",)


@dataclass(frozen=True)
class EnvBlock:
    name: str = "point_circle"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BaselineRecipe:
    variant: str = "near"
    algo: str = "PCPO"
    iters: int = 150
    h_c_b: float | None = None
    delta: float | None = None
    batch_steps: int | None = None
    seed: int = 1000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"baseline recipe variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.algo != "PCPO":
            raise ConfigError("baseline pretraining supports algo PCPO only")
        if self.iters < 0 or self.seed < 0:
            raise ConfigError("recipe iters and seed must be non-negative")


@dataclass(frozen=True)
class BaselineBlock:
    kind: str = "none"
    path: str | None = None
    recipe: BaselineRecipe | None = None
    tag: str | None = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"baseline kind must be one of {BASELINE_KINDS}, got {self.kind!r}")
        if self.kind == "checkpoint" and not self.path:
            raise ConfigError("baseline kind 'checkpoint' needs a path")
        if self.kind == "pretrain" and self.recipe is None:
            raise ConfigError("baseline kind 'pretrain' needs a recipe")
        if self.kind == "handcrafted" and self.tag not in HANDCRAFTED:
            raise ConfigError(f"handcrafted baseline tag must be one of {HANDCRAFTED}")


@dataclass(frozen=True)
class OutputBlock:
    dir: str = "runs/default"
    checkpoint_every: int = 0
    metrics_file: str = "metrics.csv"
    record_wall_time: bool = False

    def __post_init__(self):
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvBlock = field(default_factory=EnvBlock)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    baseline: BaselineBlock = field(default_factory=BaselineBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    seeds: tuple = (0,)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")


def _build(cls, raw, where, exclude=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(known)}")
    kwargs = {}
    for key, value in raw.items():
        # YAML reads 1e-4 as a string; coerce against float-typed fields
        if "float" in str(known[key].type) and isinstance(value, (int, str)) and not isinstance(value, bool):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where}.{key}: expected a number, got {value!r}") from None
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict, base_dir: str | Path | None = None, check_files=True) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = sorted(set(raw) - {"env", "algo", "baseline", "output", "seeds"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    env = _build(EnvBlock, raw.get("env"), "env")
    make_env(env.name, env.params)
    algo = _build(AlgoConfig, raw.get("algo"), "algo", exclude=("seed",))
    braw = dict(raw.get("baseline") or {})
    if "recipe" in braw and braw["recipe"] is not None:
        braw["recipe"] = _build(BaselineRecipe, braw["recipe"], "baseline.recipe")
    baseline = _build(BaselineBlock, braw, "baseline")
    if baseline.kind == "checkpoint" and check_files:
        path = Path(baseline.path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.is_file():
            raise ConfigError(f"baseline checkpoint {path} does not exist")
        baseline = dataclasses.replace(baseline, path=str(path))
    output = _build(OutputBlock, raw.get("output"), "output")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, (list, tuple)):
        raise ConfigError("seeds must be a list of integers")
    return ExperimentConfig(env, algo, baseline, output, tuple(seeds))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    algo = dataclasses.asdict(cfg.algo)
    algo.pop("seed")
    baseline = {k: v for k, v in dataclasses.asdict(cfg.baseline).items() if v is not None}
    return {
        "env": {"name": cfg.env.name, "params": dict(cfg.env.params)},
        "algo": algo,
        "baseline": baseline,
        "output": dataclasses.asdict(cfg.output),
        "seeds": list(cfg.seeds),
    }


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parse_config(raw, base_dir=path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
