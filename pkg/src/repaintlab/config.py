"""Sectioned JSON run configuration with typo-safe validation.

A run config document may contain the sections {corpus, denoiser, train,
repaint, metrics, evaluate}; every field is optional and falls back to the
defaults below. Unknown sections or keys are rejected with the JSON pointer
of the offending field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    classes: int = 8
    per_class: int = 500
    size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class RepaintConfig:
    jump: int = 5
    seed: int = 0


@dataclass(frozen=True)
class MetricsConfig:
    embed_steps: int = 2500
    embed_batch: int = 32
    embed_lr: float = 2e-3
    seed: int = 0


@dataclass(frozen=True)
class EvaluateConfig:
    n: int = 400
    jump: int = 5
    batch: int = 50
    seed: int = 0


_SECTIONS = {
    "corpus": CorpusConfig,
    "denoiser": DenoiserConfig,
    "train": TrainConfig,
    "repaint": RepaintConfig,
    "metrics": MetricsConfig,
    "evaluate": EvaluateConfig,
}


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig
    denoiser: DenoiserConfig
    train: TrainConfig
    repaint: RepaintConfig
    metrics: MetricsConfig
    evaluate: EvaluateConfig

    def resolved(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}


def _build_section(name: str, cls, doc: dict):
    known = {f.name for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key at /{name}/{key}")
    seq_fields = {"channel_mult", "res_blocks_encoder", "attention_resolutions"}
    kwargs = {
        k: tuple(v) if k in seq_fields and isinstance(v, list) else v
        for k, v in doc.items()
    }
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section /{name}: {exc}") from exc


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a sectioned document. A flat document whose keys are all
    TrainConfig fields is accepted as shorthand for {"train": doc}."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    train_fields = {f.name for f in fields(TrainConfig)}
    if doc and all(k in train_fields for k in doc):
        doc = {"train": doc}
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown key at /{key}")
    sections = {
        name: _build_section(name, cls, doc.get(name, {}))
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**sections)


def load_run_config(path) -> RunConfig:
    if path is None:
        return parse_run_config({})
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_run_config(doc)
