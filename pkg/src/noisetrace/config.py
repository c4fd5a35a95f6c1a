"""Versioned run configuration (YAML or JSON), validated before any work."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .attacks import AttackSpec
from .datasets import SynthCorpusConfig
from .detector import DetectorConfig
from .errors import ConfigError
from .separation import ExternalSeparatorAdapter, Separator, SeparatorConfig
from .training import TrainConfig

CONFIG_VERSION = 1


def _strict(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DataSection:
    manifest: str | None = None
    components: str | None = None  # root of a `separate` output tree


@dataclass
class ExternalSection:
    name: str = "external"
    command: str | None = None
    speech_dir: str | None = None


@dataclass
class SeparatorSection:
    kind: str = "builtin"  # builtin | external | none
    builtin: SeparatorConfig = field(default_factory=SeparatorConfig)
    external: ExternalSection | None = None

    def build(self) -> Separator | None:
        if self.kind == "none":
            return None
        if self.kind == "builtin":
            return Separator(self.builtin)
        if self.kind == "external":
            if self.external is None:
                raise ConfigError("separator.kind is external but separator.external is missing")
            e = self.external
            return Separator(adapter=ExternalSeparatorAdapter(e.name, e.command, e.speech_dir))
        raise ConfigError(f"separator.kind must be builtin, external or none, got {self.kind!r}")


@dataclass
class EvalSection:
    threshold: float = 0.5
    aggregate: str = "mean"
    per_segment: bool = False
    split: str = "eval"


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    synth: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)
    separator: SeparatorSection = field(default_factory=SeparatorSection)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: list[str] = field(default_factory=lambda: ["clean"])
    eval: EvalSection = field(default_factory=EvalSection)

    def attack_specs(self) -> list[AttackSpec]:
        return [AttackSpec.parse(a) for a in self.attacks]

    def to_dict(self) -> dict:
        def conv(v):
            if is_dataclass(v):
                return {k: conv(x) for k, x in asdict(v).items()}
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [conv(x) for x in v]
            return getattr(v, "value", v)

        d = conv(self)
        d["detector"] = self.detector.to_dict()
        d["train"] = self.train.to_dict()
        return d


def parse_config(data: dict | None) -> RunConfig:
    data = dict(data or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    sep = dict(data.get("separator") or {})
    bad = set(sep) - {"kind", "builtin", "external"}
    if bad:
        raise ConfigError(f"separator: unknown key(s) {sorted(bad)}")
    separator = SeparatorSection(
        kind=sep.get("kind", "builtin"),
        builtin=_strict(SeparatorConfig, sep.get("builtin"), "separator.builtin"),
        external=_strict(ExternalSection, sep["external"], "separator.external") if sep.get("external") else None,
    )
    synth = dict(data.get("synth") or {})
    if "artifact_band" in synth:
        synth["artifact_band"] = tuple(synth["artifact_band"])
    attacks = data.get("attacks", ["clean"])
    if not isinstance(attacks, list):
        raise ConfigError("attacks must be a list such as [clean, lp-6000, mp3-64]")
    for a in attacks:
        AttackSpec.parse(str(a))
    det = data.get("detector")
    try:
        cfg = RunConfig(
            version=version,
            seed=int(data.get("seed", 0)),
            out=str(data.get("out", "runs/default")),
            data=_strict(DataSection, data.get("data"), "data"),
            synth=_strict(SynthCorpusConfig, synth, "synth"),
            separator=separator,
            detector=DetectorConfig.from_dict(det) if det else DetectorConfig(),
            train=TrainConfig.from_dict(dict(data.get("train") or {})),
            attacks=[str(a) for a in attacks],
            eval=_strict(EvalSection, data.get("eval"), "eval"),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    separator.build()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return parse_config(data)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
