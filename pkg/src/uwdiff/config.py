"""YAML run configuration.

A file has up to four top-level sections, each mapping onto one dataclass::

    data:             DataConfig        (corpus root, side, split)
    estimator:        EstimatorConfig   (network shape)
    estimator_train:  EstimatorHParams  (optimisation)
    diffusion:        TrainConfig       (nested ``denoiser:`` -> DenoiserConfig)

Unknown sections or keys are rejected. Command-line overrides use dotted
paths (``diffusion.lr=3e-4``, ``diffusion.denoiser.embed_dim=32``), are parsed
as YAML scalars and are applied after the file.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

import yaml

from .data import ConfigError
from .denoiser import DenoiserConfig
from .estimator import EstimatorConfig, EstimatorHParams
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    side: int = 256
    val_fraction: float = 0.1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.side < 1 or self.workers < 1:
            raise ConfigError("side and workers must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    estimator_train: EstimatorHParams = field(default_factory=EstimatorHParams)
    diffusion: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "estimator": asdict(self.estimator),
                "estimator_train": asdict(self.estimator_train), "diffusion": self.diffusion.to_dict()}


SECTIONS = {"data": DataConfig, "estimator": EstimatorConfig,
            "estimator_train": EstimatorHParams, "diffusion": TrainConfig}


def _check_keys(cls, values: dict, where: str) -> None:
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _coerce_floats(cls, values: dict) -> dict:
    # YAML 1.1 reads "1e-4" (no dot) as a string
    out = dict(values)
    for f in fields(cls):
        if isinstance(f.default, float) and isinstance(out.get(f.name), str):
            try:
                out[f.name] = float(out[f.name])
            except ValueError:
                pass
    return out


def _build(cls, values: dict, where: str):
    _check_keys(cls, values, where)
    values = _coerce_floats(cls, values)
    if cls is TrainConfig and "denoiser" in values:
        _check_keys(DenoiserConfig, values["denoiser"], f"{where}.denoiser")
        values["denoiser"] = DenoiserConfig(**_coerce_floats(DenoiserConfig, values["denoiser"]))
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    _check_keys(RunConfig, raw, "config")
    sections = {name: {} if raw.get(name) is None else raw[name] for name in SECTIONS}
    return RunConfig(**{name: _build(cls, sections[name], name) for name, cls in SECTIONS.items()})


def parse_override(text: str) -> tuple[list[str], Any]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    return key.strip().split("."), yaml.safe_load(value) if value.strip() else None


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    raw = _deep_copy(raw)
    for text in overrides:
        path, value = parse_override(text)
        if len(path) < 2:
            raise ConfigError(f"override {text!r} must name a section and a key")
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a section")
        node[path[-1]] = value
    return raw


def _deep_copy(d: dict) -> dict:
    return {k: _deep_copy(v) if isinstance(v, dict) else v for k, v in d.items()}


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(apply_overrides(raw, overrides))


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
