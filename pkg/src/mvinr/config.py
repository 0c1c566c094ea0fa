"""Model and training configuration, stored as JSON text files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for configurations that violate a structural constraint."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and video geometry of a multi-view representation.

    Spatial sizes are expressed in stage-0 feature samples: a patch of
    ``patch_size`` output pixels corresponds to ``stem_resolution`` stage-0
    samples, and ``overlap`` extra stage-0 samples are evaluated on each side
    and cropped after the head.
    """

    view_count: int = 1
    frame_count: int = 1
    height: int = 32
    width: int = 32
    patch_size: int = 32
    stem_resolution: int = 4
    upsample_factors: tuple[int, ...] = (2, 2, 2)
    channels: tuple[int, ...] = (64, 48, 32, 24)
    base_grid_frames: tuple[int, ...] = (1,)
    base_grid_channels: tuple[int, ...] = (16,)
    base_grid_height: int = 0
    base_grid_width: int = 0
    hier_grid_frames: int = 1
    hier_grid_channels: int = 8
    stem_kernel: int = 3
    block_kernel: int = 3
    expansion: int = 2
    overlap: int = 4
    output_channels: int = 4

    def __post_init__(self):
        for name in ("upsample_factors", "channels", "base_grid_frames", "base_grid_channels"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        if self.base_grid_height <= 0:
            object.__setattr__(self, "base_grid_height", self.stage0_height)
        if self.base_grid_width <= 0:
            object.__setattr__(self, "base_grid_width", self.stage0_width)
        self.validate()

    @property
    def num_blocks(self) -> int:
        return len(self.upsample_factors)

    @property
    def total_upsampling(self) -> int:
        return math.prod(self.upsample_factors)

    @property
    def stage0_height(self) -> int:
        return self.height // self.total_upsampling

    @property
    def stage0_width(self) -> int:
        return self.width // self.total_upsampling

    @property
    def patch_rows(self) -> int:
        return self.height // self.patch_size

    @property
    def patch_cols(self) -> int:
        return self.width // self.patch_size

    def receptive_reach(self) -> float:
        """Reach of the spatial kernels, in stage-0 samples."""
        reach = self.stem_kernel // 2
        scale = 1
        for f in self.upsample_factors:
            scale *= f
            reach += (self.block_kernel // 2) / scale
        return reach

    def validate(self) -> None:
        if min(self.view_count, self.frame_count, self.height, self.width) < 1:
            raise ConfigError("video geometry must be positive")
        if not self.upsample_factors or min(self.upsample_factors) < 1:
            raise ConfigError(f"bad upsample factors {self.upsample_factors}")
        if len(self.channels) != self.num_blocks + 1:
            raise ConfigError(
                f"need {self.num_blocks + 1} channel widths, got {len(self.channels)}")
        if self.stem_resolution * self.total_upsampling != self.patch_size:
            raise ConfigError(
                f"stem resolution {self.stem_resolution} x upsampling "
                f"{self.total_upsampling} != patch size {self.patch_size}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} must divide {self.width}x{self.height}")
        if len(self.base_grid_frames) != len(self.base_grid_channels) or not self.base_grid_frames:
            raise ConfigError("base_grid_frames and base_grid_channels must pair up")
        if min(self.base_grid_frames) < 1 or self.hier_grid_frames < 1:
            raise ConfigError("grid temporal sizes must be >= 1")
        if self.stem_kernel % 2 == 0 or self.block_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if self.overlap < self.receptive_reach():
            raise ConfigError(
                f"overlap {self.overlap} below receptive reach {self.receptive_reach():.3f}")

    @classmethod
    def for_video(cls, view_count: int, frame_count: int, height: int, width: int,
                  **overrides) -> "ModelConfig":
        """Default desk-scale configuration sized for a given video."""
        kw = dict(view_count=view_count, frame_count=frame_count, height=height, width=width,
                  base_grid_frames=(frame_count, max(1, (frame_count + 1) // 2)),
                  base_grid_channels=(16, 16),
                  hier_grid_frames=frame_count)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 300
    stage2_epochs: int = 60
    lmbdas: tuple[float, ...] = (1e8, 1e9, 1e10)
    learning_rate: float = 2e-3
    min_lr_ratio: float = 0.01
    warmup_epochs: int = 0
    stage2_param_lr_scale: float = 0.01
    stage2_step_lr_scale: float = 1.0
    batch_size: int = 8
    seed: int = 0
    noise_start: float = 0.1
    noise_end: float = 1.0
    quant_width: int = 7
    width_multipliers: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lmbdas", tuple(float(x) for x in self.lmbdas))
        object.__setattr__(self, "width_multipliers",
                           tuple(float(x) for x in self.width_multipliers))
        self.validate()

    @property
    def stage2_param_lr(self) -> float:
        return self.learning_rate * self.stage2_param_lr_scale

    @property
    def stage2_step_lr(self) -> float:
        return self.learning_rate * self.stage2_step_lr_scale

    def validate(self) -> None:
        if self.stage1_epochs < 1 or self.stage2_epochs < 0:
            raise ConfigError("stage1_epochs must be >= 1 and stage2_epochs >= 0")
        if any(l < 0 for l in self.lmbdas):
            raise ConfigError(f"lambda values must be >= 0, got {self.lmbdas}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("learning_rate and batch_size must be positive")
        if self.stage2_param_lr >= self.learning_rate:
            raise ConfigError("stage-2 parameter learning rate must be below the base rate")
        if self.stage2_param_lr >= self.stage2_step_lr:
            raise ConfigError("stage-2 parameter learning rate must be below the step-size rate")
        for r in (self.noise_start, self.noise_end):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"noise rate {r} outside [0, 1]")
        if not 2 <= self.quant_width <= 16:
            raise ConfigError(f"quant_width {self.quant_width} outside [2, 16]")
        if self.width_multipliers and len(self.width_multipliers) != len(self.lmbdas):
            raise ConfigError("width_multipliers must pair with lmbdas")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


def scale_widths(config: ModelConfig, multiplier: float) -> ModelConfig:
    """Scale every channel width by ``multiplier`` (rounded, at least 4)."""
    if multiplier == 1.0:
        return config
    channels = tuple(max(4, int(round(c * multiplier))) for c in config.channels)
    return dataclasses.replace(config, channels=channels)


@dataclass
class CodecConfig:
    """Model overrides plus training settings, as read from one config file."""

    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def load(cls, path) -> "CodecConfig":
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - {"model", "train"}
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
        return cls(dict(doc.get("model", {})), TrainConfig.from_dict(doc.get("train", {})))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps({"model": self.model, "train": self.train.to_dict()},
                                         indent=2) + "\n")

    def model_config(self, view_count, frame_count, height, width) -> ModelConfig:
        return ModelConfig.for_video(view_count, frame_count, height, width, **self.model)
