"""Run configuration: one JSON file holding every training and inference knob.

Missing keys fall back to the defaults below; unknown keys are rejected so a
typo cannot silently leave a default in place.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .fusion import FusionConfig
from .kar import KarTrainConfig
from .mtcg import MtcgTrainConfig
from .negatives import STRATEGIES


class ConfigError(ValueError):
    pass


def _default_encoder() -> dict:
    return dict(n_layers=2, d=64, n_heads=4, d_ff=128, max_len=64, renormalize_mask=False)


@dataclass
class RunConfig:
    seed: int = 0
    encoder: dict = field(default_factory=_default_encoder)
    mtcg: MtcgTrainConfig = field(default_factory=MtcgTrainConfig)
    kar: KarTrainConfig = field(default_factory=KarTrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    neg_strategy: str = "online"
    kar_warm_start: bool = False

    def __post_init__(self):
        if self.neg_strategy not in STRATEGIES:
            raise ConfigError(f"neg_strategy must be one of {STRATEGIES}")
        unknown = set(self.encoder) - set(_default_encoder())
        if unknown:
            raise ConfigError(f"unknown encoder keys: {sorted(unknown)}")
        self.encoder = {**_default_encoder(), **self.encoder}

    def with_seed(self, seed: int | None) -> "RunConfig":
        """Copy with ``seed`` propagated into every stochastic stage."""
        if seed is None:
            seed = self.seed
        raw = self.to_dict()
        raw["seed"] = seed
        raw["mtcg"]["seed"] = seed
        raw["kar"]["seed"] = seed
        return RunConfig.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sections = {"mtcg": MtcgTrainConfig, "kar": KarTrainConfig, "fusion": FusionConfig}
        for name, kind in sections.items():
            if name in raw:
                section = raw[name]
                allowed = {f.name for f in fields(kind)}
                bad = set(section) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
                raw[name] = kind(**section)
        return cls(**raw)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)
