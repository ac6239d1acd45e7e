"""Engine configuration.

One dataclass carries every knob the engine reads: the memory policy
(interval, capacity), the multi-scale/flip inference fusion, model
dimensions, and the training-time ViT freeze. Values are JSON-friendly
so configs round-trip through the CLI.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import List

from .errors import ConfigError


@dataclass
class EngineConfig:
    memory_interval: int = 3
    memory_capacity: int = 8
    scales: List[float] = field(default_factory=lambda: [1.0, 1.5])
    flip_fusion: bool = True
    base_size: int = 128
    seed: int = 0
    freeze_vit: bool = False
    query_count: int = 8
    channels: int = 64

    # architecture knobs with fixed defaults
    patch: int = 8
    vit_blocks: int = 4
    vit_heads: int = 2
    pyramid_channels: List[int] = field(default_factory=lambda: [32, 64, 128])
    deform_heads: int = 2
    deform_points: int = 4
    fusion_depth: int = 1
    memory_key_channels: int = 32
    memory_value_channels: int = 64
    # similarity gate for discriminative updates; -inf accepts every match
    query_threshold: float = float("-inf")

    def validate(self) -> "EngineConfig":
        if self.memory_interval < 1:
            raise ConfigError(f"memory_interval must be >= 1, got {self.memory_interval}")
        if self.memory_capacity < 1:
            raise ConfigError(f"memory_capacity must be >= 1, got {self.memory_capacity}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be nonempty and positive, got {self.scales}")
        if self.base_size < 16 or self.base_size % 16:
            raise ConfigError(f"base_size must be a positive multiple of 16, got {self.base_size}")
        if self.channels % self.vit_heads or self.channels % self.deform_heads:
            raise ConfigError(f"channels {self.channels} must divide by head counts "
                              f"{self.vit_heads}/{self.deform_heads}")
        if self.query_count < 1:
            raise ConfigError(f"query_count must be >= 1, got {self.query_count}")
        if len(self.pyramid_channels) != 3:
            raise ConfigError(f"pyramid needs exactly 3 levels, got {self.pyramid_channels}")
        return self

    def variant_size(self, scale: float) -> int:
        """Side length for a scale variant, snapped to the 16-pixel grid."""
        return max(16, int(round(self.base_size * scale / 16.0)) * 16)

    ARCHITECTURE_FIELDS = ("channels", "patch", "vit_blocks", "vit_heads",
                           "pyramid_channels", "deform_heads", "deform_points",
                           "fusion_depth", "memory_key_channels",
                           "memory_value_channels", "query_count", "base_size")

    def architecture(self) -> dict:
        """The fields that determine parameter shapes (checkpoint compatibility)."""
        d = asdict(self)
        return {k: d[k] for k in self.ARCHITECTURE_FIELDS}

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no -inf; encode "accept every match" as null
        if d["query_threshold"] == float("-inf"):
            d["query_threshold"] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        # JSON has no -inf; a null threshold means "accept every match"
        if raw.get("query_threshold", 0.0) is None:
            raw["query_threshold"] = float("-inf")
        return cls(**raw).validate()

    @classmethod
    def from_json_file(cls, path: str) -> "EngineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
