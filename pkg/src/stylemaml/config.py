"""Run configuration stored as a flat ``section.key = value`` text file.

Values are JSON literals (numbers, booleans, strings, lists); bare words are
read as strings. Lines starting with ``#`` are comments. Any key can be
overridden from the environment as ``STYLEMAML__<section>__<key>=<value>``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .core import ConfigError, TrainConfig, config_from_dict
from .model import ModelConfig
from .syndata import GeneratorConfig, SyntheticWorld

ENV_PREFIX = "STYLEMAML__"


@dataclass
class PipelineConfig:
    pretrain_steps: int = 2000
    meta_iters: int = 500
    adapt_steps: int = 1000
    snapshots: tuple = (10, 50, 100, 200, 500, 1000)
    eval_seeds: tuple = (0, 1, 2)
    probe_texts: int = 4
    adapt_log_every: int = 10
    pretrain_log_every: int = 50

    def validate(self) -> "PipelineConfig":
        if self.pretrain_steps < 0 or self.meta_iters < 0 or self.adapt_steps < 0:
            raise ConfigError("phase budgets must be >= 0")
        if any(int(s) < 0 for s in self.snapshots):
            raise ConfigError("snapshot marks must be >= 0")
        return self


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    output_dir: str = "runs/default"

    SECTIONS = ("generator", "model", "train", "pipeline")

    def validate(self) -> "RunConfig":
        self.train.validate()
        self.generator.validate(self.train.n_shots)
        self.model.validate()
        self.pipeline.validate()
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            generator=dataclasses.replace(self.generator, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def resolved_model(self, world: SyntheticWorld) -> ModelConfig:
        """Fill the corpus-dependent model fields (speaker count, quantization ranges)."""
        pitch, energy = world.variance_ranges()
        n = self.generator.n_train_speakers
        return dataclasses.replace(
            self.model,
            bins=self.generator.bins,
            alphabet_size=self.generator.alphabet_size,
            n_classes=n,
            lut_entries=n,
            pitch_range=tuple(round(v, 6) for v in pitch),
            energy_range=tuple(round(v, 6) for v in energy),
        )

    # -- flat text form -------------------------------------------------------

    def to_flat(self) -> dict[str, Any]:
        flat = {"output_dir": self.output_dir}
        for sec in self.SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                v = getattr(getattr(self, sec), f.name)
                flat[f"{sec}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return flat

    def dumps(self) -> str:
        lines = ["# stylemaml run configuration (flat key = JSON value)"]
        for k, v in self.to_flat().items():
            lines.append(f"{k} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any]) -> "RunConfig":
        sections: dict[str, dict] = {s: {} for s in cls.SECTIONS}
        out_dir = "runs/default"
        for key, v in flat.items():
            if key == "output_dir":
                out_dir = str(v)
                continue
            sec, _, name = key.partition(".")
            if sec not in sections or not name:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = v
        base = cls()
        cfg = cls(
            generator=config_from_dict(GeneratorConfig, {**_fields(base.generator), **sections["generator"]}),
            model=config_from_dict(ModelConfig, {**_fields(base.model), **sections["model"]}),
            train=config_from_dict(TrainConfig, {**_fields(base.train), **sections["train"]}),
            pipeline=config_from_dict(PipelineConfig, {**_fields(base.pipeline), **sections["pipeline"]}),
            output_dir=out_dir,
        )
        return cfg

    @classmethod
    def loads(cls, text: str, env: Mapping[str, str] | None = None) -> "RunConfig":
        flat = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, _, raw = line.partition("=")
            flat[key.strip()] = _parse_value(raw.strip())
        for k, v in (env if env is not None else os.environ).items():
            if k.startswith(ENV_PREFIX):
                flat[k[len(ENV_PREFIX) :].replace("__", ".")] = _parse_value(v)
        try:
            return cls.from_flat(flat)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path, env: Mapping[str, str] | None = None) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        return cls.loads(p.read_text(), env)


def _fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
