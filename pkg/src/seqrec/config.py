"""Shared configuration file (TOML or JSON) for the command line and the service.

Sections, all optional::

    [synth]            SynthConfig fields
    [model]            EncoderConfig fields plus use_age_feature
    [fallback]         layers, loss, negatives
    [seq2seq]          Seq2SeqConfig fields plus min_items
    [train]            TrainConfig fields for the ranking and fallback models
    [seq2seq_train]    TrainConfig fields for the outfit generator
    [service]          host, port, artifacts
    [service.use_cases.<name>]   UseCaseConfig fields
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .evalharness.synth import SynthConfig
from .model import EncoderConfig, Seq2SeqConfig, TrainConfig
from .pipeline import ConfigError, UseCaseConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class FallbackSettings:
    layers: int = 1
    loss: str = "bpr"
    negatives: int = 16


@dataclass
class ServiceSettings:
    host: str = "127.0.0.1"
    port: int = 8080
    artifacts: str = "artifacts"
    use_cases: dict[str, UseCaseConfig] = field(default_factory=lambda: {"default": UseCaseConfig("default")})


@dataclass
class AppConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    use_age_feature: bool = False
    fallback: FallbackSettings = field(default_factory=FallbackSettings)
    seq2seq: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    min_items: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)
    seq2seq_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5))
    service: ServiceSettings = field(default_factory=ServiceSettings)


def _build(cls, section: str, raw: dict, **extra):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {unknown}")
    try:
        return cls(**{**raw, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(raw: dict) -> AppConfig:
    sections = {"synth", "model", "fallback", "seq2seq", "train", "seq2seq_train", "service"}
    unknown = sorted(set(raw) - sections)
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    cfg = AppConfig()
    if "synth" in raw:
        cfg.synth = _build(SynthConfig, "synth", raw["synth"])
        try:
            cfg.synth.validate()
        except ValueError as exc:
            raise ConfigError(f"[synth]: {exc}") from None
    if "model" in raw:
        model = dict(raw["model"])
        cfg.use_age_feature = bool(model.pop("use_age_feature", False))
        cfg.model = _build(EncoderConfig, "model", model)
    if "fallback" in raw:
        cfg.fallback = _build(FallbackSettings, "fallback", raw["fallback"])
    if "seq2seq" in raw:
        s2s = dict(raw["seq2seq"])
        cfg.min_items = int(s2s.pop("min_items", 2))
        cfg.seq2seq = _build(Seq2SeqConfig, "seq2seq", s2s)
    if "train" in raw:
        cfg.train = _build(TrainConfig, "train", raw["train"])
    if "seq2seq_train" in raw:
        cfg.seq2seq_train = _build(TrainConfig, "seq2seq_train", raw["seq2seq_train"])
    if "service" in raw:
        svc = dict(raw["service"])
        cases = svc.pop("use_cases", None)
        settings = _build(ServiceSettings, "service", svc)
        if cases is not None:
            if not isinstance(cases, dict) or not cases:
                raise ConfigError("[service.use_cases] must be a non-empty table")
            settings.use_cases = {name: UseCaseConfig.from_dict(name, body) for name, body in cases.items()}
        cfg.service = settings
    return cfg


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    try:
        raw = json.loads(text) if p.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return parse_config(raw)
