"""Experiment configuration in a flat ``key = value`` text format.

Lines starting with ``#`` are comments. Tuples are comma separated. Any key
not listed in :class:`ExperimentConfig` is an error.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .fairness import FrequencyVector
from .testbed import PopulationSpec
from .tuning import SdatConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    pretrain_weights: tuple[float, ...] = (0.9, 0.1)
    target_weights: tuple[float, ...] = (0.5, 0.5)
    target_samples: int = 2000
    classifier_epochs: int = 200
    classifier_lr: float = 1e-2
    pretrain_steps: int = 3000
    pretrain_batch: int = 128
    pretrain_lr: float = 5e-3
    pretrain_samples: int = 2000
    pretrain_retries: int = 3
    tau: float = 0.8
    lambda_reg: float = 1.0
    batch_size: int = 64
    steps: int = 2000
    target_batches: int = 1
    lr: float = 1e-3
    confidence_source: str = "target"
    counting: str = "argmax"
    eval_samples: int = 2000
    eval_every: int = 250
    reg_probe_samples: int = 512
    svg: bool = False
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        try:
            PopulationSpec(tuple(self.pretrain_weights))
            PopulationSpec(tuple(self.target_weights))
            FrequencyVector(tuple(self.target_weights))
            self.sdat()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("target_samples", "classifier_epochs", "pretrain_batch",
                     "pretrain_samples", "eval_samples", "reg_probe_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("pretrain_steps", "pretrain_retries", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.counting not in ("argmax", "soft"):
            raise ConfigError("counting must be 'argmax' or 'soft'")

    def sdat(self) -> SdatConfig:
        return SdatConfig(
            tau=self.tau,
            lambda_reg=self.lambda_reg,
            batch_size=self.batch_size,
            steps=self.steps,
            target_batches=self.target_batches,
            lr=self.lr,
            seed=self.seed,
            confidence_source=self.confidence_source,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind.startswith("tuple"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_config(text: str, **overrides) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    return ExperimentConfig(**values)


def load_config(path=None, **overrides) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
