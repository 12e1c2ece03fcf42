"""Run configuration: INI-style ``[section] key = value`` files plus overrides."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .env import ConfigError, GeneratorSpec, UniformIntegers, UniformReal
from .policy import PolicyConfig

__all__ = [
    "EnvConfig",
    "TrainConfig",
    "PathsConfig",
    "Config",
    "load_config",
    "parse_config_text",
    "apply_overrides",
    "config_to_text",
]


@dataclass(frozen=True)
class EnvConfig:
    n_nodes: int = 15
    demand_kind: str = "uniform_integers"
    demand_lo: float = 1.0
    demand_hi: float = 23.0
    demand_scale: float = 10.0
    box: float = 1.0
    pool_csv: str = ""

    def generator_spec(self, seed: int) -> GeneratorSpec:
        if self.demand_kind == "uniform_integers":
            kind = UniformIntegers(int(self.demand_lo), int(self.demand_hi), float(self.demand_scale))
        else:
            kind = UniformReal(float(self.demand_lo), float(self.demand_hi))
        return GeneratorSpec(self.n_nodes, kind, self.box, seed)

    def problems(self) -> list[str]:
        out = []
        if self.demand_kind not in ("uniform_integers", "uniform_real"):
            out.append("env.demand_kind must be uniform_integers or uniform_real")
            return out
        try:
            self.generator_spec(0).validate()
        except ConfigError as exc:
            out.append(f"env: {exc}")
        return out


@dataclass(frozen=True)
class TrainConfig:
    num_epochs: int = 600
    batches_per_epoch: int = 100
    batch_size: int = 128
    lr0: float = 2.0**-11
    lr_decay: float = 0.96
    lr_freeze_epoch: int = 90
    baseline_win_threshold: float = 0.5
    baseline_streak: int = 10
    baseline_instant_threshold: float = 0.7
    baseline_mode: str = "sample"
    algorithm: str = "rollout_baseline"
    gamma: float = 1.0
    max_grad_norm: float = 0.0
    seed: int = 0
    log_batches: bool = False

    def problems(self) -> list[str]:
        out = []
        for name in ("num_epochs", "batches_per_epoch", "batch_size", "baseline_streak"):
            if getattr(self, name) < 1:
                out.append(f"train.{name} must be >= 1")
        if self.lr_freeze_epoch < 1:
            out.append("train.lr_freeze_epoch must be >= 1")
        if not self.lr0 > 0:
            out.append("train.lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            out.append("train.lr_decay must be in (0, 1]")
        for name in ("baseline_win_threshold", "baseline_instant_threshold"):
            if not 0 < getattr(self, name) < 1:
                out.append(f"train.{name} must be in (0, 1)")
        if self.baseline_mode not in ("sample", "greedy"):
            out.append("train.baseline_mode must be sample or greedy")
        if self.algorithm not in ("rollout_baseline", "no_baseline"):
            out.append("train.algorithm must be rollout_baseline or no_baseline")
        if not 0 < self.gamma <= 1:
            out.append("train.gamma must be in (0, 1]")
        if self.max_grad_norm < 0:
            out.append("train.max_grad_norm must be >= 0 (0 disables clipping)")
        if self.seed < 0:
            out.append("train.seed must be non-negative")
        return out


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class Config:
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        problems = self.env.problems() + self.train.problems()
        try:
            self.policy.validate()
        except ConfigError as exc:
            problems.extend(f"policy: {p}" for p in str(exc).split("; "))
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {s: dataclasses.asdict(getattr(self, s)) for s in _SECTIONS}

    @classmethod
    def from_dict(cls, data: dict[str, dict[str, Any]]) -> Config:
        return _build(data)

    def with_values(self, **sections: dict[str, Any]) -> Config:
        """Copy with some fields replaced, e.g. ``with_values(train={"seed": 3})``."""
        parts = {s: getattr(self, s) for s in _SECTIONS}
        for s, values in sections.items():
            parts[s] = dataclasses.replace(parts[s], **values)
        cfg = Config(**parts)
        cfg.validate()
        return cfg


_SECTIONS = {"env": EnvConfig, "policy": PolicyConfig, "train": TrainConfig, "paths": PathsConfig}


def _coerce(section: str, key: str, raw: Any, problems: list[str]) -> Any:
    hints = typing.get_type_hints(_SECTIONS[section])
    kind = hints[key]
    if not isinstance(raw, str):
        raw_value = raw
        if kind is float and isinstance(raw_value, int) and not isinstance(raw_value, bool):
            return float(raw_value)
        return raw_value
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(eval_number(text))
        return text
    except ValueError:
        problems.append(f"{section}.{key}: cannot parse {text!r} as {kind.__name__}")
        return None


def eval_number(text: str) -> float:
    """Float literal, also accepting ``a**b`` / ``a^b`` powers such as ``2**-11``."""
    for op in ("**", "^"):
        if op in text:
            base, power = text.split(op, 1)
            return float(base) ** float(power)
    return float(text)


def _build(values: dict[str, dict[str, Any]]) -> Config:
    problems: list[str] = []
    parts = {}
    for section in values:
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
    for section, cls in _SECTIONS.items():
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.get(section, {}).items():
            if key not in names:
                problems.append(f"unknown key {section}.{key}")
                continue
            value = _coerce(section, key, raw, problems)
            if value is not None:
                kwargs[key] = value
        parts[section] = cls(**kwargs)
    if problems:
        raise ConfigError("; ".join(problems))
    cfg = Config(**parts)
    cfg.validate()
    return cfg


def parse_config_text(text: str, overrides: list[str] | None = None) -> Config:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    values = {s: dict(parser.items(s)) for s in parser.sections()}
    return _build(_merge_overrides(values, overrides or []))


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> Config:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config_text(text, overrides)


def _merge_overrides(values: dict[str, dict[str, Any]], overrides: list[str]) -> dict:
    problems = []
    merged = {s: dict(v) for s, v in values.items()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"override {item!r} must look like section.key=value")
            continue
        lhs, rhs = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        merged.setdefault(section, {})[key] = rhs
    if problems:
        raise ConfigError("; ".join(problems))
    return merged


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    values = {s: {k: v for k, v in d.items()} for s, d in cfg.to_dict().items()}
    return _build(_merge_overrides(values, overrides))


def config_to_text(cfg: Config) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
