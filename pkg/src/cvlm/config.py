"""Run configuration: nested dataclasses loaded from TOML or JSON.

Every field has a default, so an empty file is a valid config. Unknown keys
anywhere are rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field

from .data import DEFAULT_VOCAB_SIZES
from .errors import ConfigError
from .model import FkaSection, HostSection, ModelConfig, VisionConfig, VkaSection
from .training import STAGES, StageConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class WorldConfig:
    seed: int = 0
    n_entities: int = 64
    vocab_sizes: dict = field(default_factory=lambda: dict(DEFAULT_VOCAB_SIZES))
    knowledge_layouts: int = 2
    layouts_per_combo: int = 4
    max_distractors: int = 3
    host_corpus: int = 4096  # lines of text-only host pretraining data


@dataclass
class EvalConfig:
    split: str = "held_in"
    batch_size: int = 64
    max_new_tokens: int = 4


@dataclass
class SweepConfig:
    lds: list = field(default_factory=lambda: [0, 2, 4, 8])
    use_vka: list = field(default_factory=lambda: [True, False])
    splits: list = field(default_factory=lambda: ["held_in", "held_out"])


@dataclass
class PathsConfig:
    data: str = ""  # manifest from gen-data; empty means regenerate from [world]
    out: str = "runs"


def default_stages():
    return {
        "host_pretrain": StageConfig("host_pretrain", steps=400, lr={"hostlm": 2e-3},
                                     batch_size=32),
        "mlp_caption": StageConfig("mlp_caption", steps=200, lr={"mlp": 1e-3}),
        "vka_pretrain": StageConfig("vka_pretrain", steps=800,
                                    lr={"vision": 1e-3, "vka": 1e-3}),
        "vka_align": StageConfig("vka_align", steps=1000, lr={"vka": 3e-3}),
        "instruction_tune": StageConfig("instruction_tune", steps=600,
                                        lr={"fka": 1e-3, "lora": 1e-3, "mlp": 2e-4,
                                            "vka": 2e-4}),
    }


@dataclass
class RunConfig:
    seed: int = 0
    host_pretrain: bool = True  # pretrain the host on text before stage 1
    caption_warmup: bool = False
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict = field(default_factory=default_stages)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def stage(self, name):
        cfg = dataclasses.replace(self.stages[name])
        cfg.lr = dict(cfg.lr)
        return cfg

    def with_seed(self, seed):
        """Copy with the run seed propagated to world, model and every stage."""
        out = from_dict(to_dict(self))
        out.seed = seed
        out.world.seed = seed
        out.model.seed = seed
        for s in out.stages.values():
            s.seed = seed
        return out


_NESTED = {
    RunConfig: {"world": WorldConfig, "model": ModelConfig, "eval": EvalConfig,
                "sweep": SweepConfig, "paths": PathsConfig},
    ModelConfig: {"vision": VisionConfig, "vka": VkaSection, "fka": FkaSection,
                  "host": HostSection},
}


def _build(cls, values, path):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'} must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    nested = _NESTED.get(cls, {})
    for key, val in values.items():
        sub = f"{path}.{key}" if path else key
        if key in nested:
            kwargs[key] = _build(nested[key], val, sub)
        elif cls is RunConfig and key == "stages":
            kwargs[key] = _build_stages(val, sub)
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _build_stages(values, path):
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must be a table")
    stages = default_stages()
    names = {f.name for f in dataclasses.fields(StageConfig)} - {"stage"}
    for name, body in values.items():
        if name not in STAGES:
            raise ConfigError(f"unknown config key: {path}.{name}")
        if not isinstance(body, dict):
            raise ConfigError(f"{path}.{name} must be a table")
        body = dict(body)
        if body.pop("stage", name) != name:
            raise ConfigError(f"{path}.{name}.stage must be {name!r}")
        unknown = sorted(set(body) - names)
        if unknown:
            raise ConfigError("unknown config key(s): "
                              + ", ".join(f"{path}.{name}.{k}" for k in unknown))
        merged = {k: v for k, v in dataclasses.asdict(stages[name]).items() if k != "stage"}
        merged.update(body)
        stages[name] = StageConfig(stage=name, **merged)
    return stages


def from_dict(values):
    cfg = _build(RunConfig, values, "")
    if cfg.eval.split not in ("train", "held_in", "held_out"):
        raise ConfigError(f"eval.split must be train, held_in or held_out, got {cfg.eval.split!r}")
    return cfg


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path):
    """Parse a ``.toml`` or ``.json`` run config."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        if str(path).endswith(".json"):
            values = json.loads(raw.decode("utf-8"))
        else:
            values = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(values)


def dump_resolved(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def model_config_from_dict(values):
    return _build(ModelConfig, values, "model")
