"""Pipeline configuration.

Every threshold used by the mapping and grounding stages lives here so that a
run can be reproduced from a single dumped JSON file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


ABLATIONS = ("none", "structural-only", "semantic-only")


@dataclass(frozen=True)
class PipelineConfig:
    # consensus
    tau_obs: float = 0.3
    tau_sub: float = 0.8
    tau_thres: float = 0.6
    overlap_over: str = "mask"
    allow_self_support: bool = True
    ablate: str = "none"

    # geometry
    voxel_size: float = 0.05
    frame_stride: int = 4
    min_mask_pixels: int = 50
    min_component_voxels: int = 10

    # merging
    observer_percentile_step: float = 5.0
    reschedule_each_generation: bool = False
    max_generations: int = 50
    underseg_fraction: float = 0.3

    # feature aggregation
    topk_masks: int = 5
    crop_levels: int = 3
    crop_expand: float = 0.2

    # grounding
    candidates: int = 8
    neighbors: int = 5
    neighbor_radius: float = 2.0
    success_radius: float = 1.0
    text_embed_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("tau_obs", "tau_sub", "tau_thres", "underseg_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if not 0.0 < self.observer_percentile_step <= 100.0:
            raise ConfigError("observer_percentile_step must lie in (0, 100]")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.frame_stride < 1:
            raise ConfigError("frame_stride must be >= 1")
        if self.topk_masks < 1 or self.crop_levels < 1 or self.candidates < 1:
            raise ConfigError("topk_masks, crop_levels and candidates must be >= 1")
        if self.neighbors < 0:
            raise ConfigError("neighbors must be >= 0")
        if self.neighbor_radius <= 0 or self.success_radius <= 0:
            raise ConfigError("radii must be positive")
        if self.crop_expand < 0:
            raise ConfigError("crop_expand must be >= 0")
        if self.max_generations < 1:
            raise ConfigError("max_generations must be >= 1")
        if self.overlap_over not in ("mask", "frame"):
            raise ConfigError(f"overlap_over must be 'mask' or 'frame', got {self.overlap_over!r}")
        if self.ablate not in ABLATIONS:
            raise ConfigError(f"ablate must be one of {ABLATIONS}, got {self.ablate!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides: dict[str, Any]) -> PipelineConfig:
        known = {f.name: f for f in fields(self)}
        clean = {}
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(self, key)
            # bool is an int subclass; check it first
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{key} expects a boolean")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{key} expects an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} expects a number")
                value = float(value)
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"{key} expects a string")
            clean[key] = value
        return replace(self, **clean)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        return cls().with_overrides(data)

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(data)
