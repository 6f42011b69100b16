"""Run configuration: defaults, JSON round trip, overrides, hashing.

The JSON layout mirrors the dataclass fields; `synth.*` nests the corpus
generator settings. `apply_overrides` accepts dotted-path key=value pairs
(CLI `--set`).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # encoding
    segments: int = 32            # temporal segments per clip (P)
    bins: int = 5                 # voxel time bins (B)
    # model
    model_dim: int = 64           # token width (C); large-scale setting: 1024
    heads: int = 4
    window: int = 8               # attention window (I)
    downsample: int = 4           # token fusion ratio
    rbf_sigma: float = 16.0
    ffn_dim: int = 256
    decoder_blocks: int = 4
    max_gen_len: int = 16
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    # loss weights
    lambda_inter: float = 1.0
    lambda_final: float = 1.0
    lambda_ce: float = 1.0
    # optimization
    lr0: float = 3e-5
    weight_decay: float = 0.001
    batch_size: int = 2
    epochs: int = 40
    protocol: str = "s2g"         # "s2g" or "s2gt"
    seed: int = 7
    # paths
    corpus_dir: str = "corpus"
    out_dir: str = "runs/default"
    # corpus generation
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        if self.segments < 1 or self.bins < 1:
            raise ConfigError("segments and bins must be positive")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.backbone_channels[-1] != self.model_dim:
            raise ConfigError("backbone_channels must end at model_dim")
        if min(self.lambda_inter, self.lambda_final, self.lambda_ce) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.protocol not in ("s2g", "s2gt"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.rbf_sigma <= 0:
            raise ConfigError("rbf_sigma must be positive")
        if self.decoder_blocks < 1 or self.max_gen_len < 1:
            raise ConfigError("decoder_blocks and max_gen_len must be positive")
        self.synth.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["synth"]["split_fractions"] = list(self.synth.split_fractions)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash_bytes(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()

    @staticmethod
    def from_dict(d: dict) -> "Config":
        d = dict(d)
        synth_d = d.pop("synth", {})
        known = {f.name for f in fields(Config)} - {"synth"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        synth_known = {f.name for f in fields(SynthConfig)}
        synth_unknown = set(synth_d) - synth_known
        if synth_unknown:
            raise ConfigError(f"unknown synth keys: {sorted(synth_unknown)}")
        cfg = Config(**d, synth=SynthConfig(**synth_d))
        if isinstance(cfg.backbone_channels, list):
            cfg.backbone_channels = tuple(cfg.backbone_channels)
        if isinstance(cfg.synth.split_fractions, list):
            cfg.synth.split_fractions = tuple(cfg.synth.split_fractions)
        cfg.validate()
        return cfg

    @staticmethod
    def load(path: str | Path) -> "Config":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON in {path}: {exc}") from exc
        return Config.from_dict(raw)


def _coerce(current, text: str):
    if isinstance(current, bool):
        if text.lower() in ("true", "1"):
            return True
        if text.lower() in ("false", "0"):
            return False
        raise ConfigError(f"expected bool, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (tuple, list)):
        parts = [p for p in text.split(",") if p]
        elem = current[0] if len(current) else 0
        return tuple(type(elem)(p) for p in parts)
    return text


def apply_overrides(config: Config, pairs: list[str]) -> Config:
    """Apply `key=value` / `synth.key=value` overrides in order."""
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        target = config
        name = key
        if key.startswith("synth."):
            target = config.synth
            name = key[len("synth."):]
        if not hasattr(target, name):
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        try:
            setattr(target, name, _coerce(current, value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    config.validate()
    return config
