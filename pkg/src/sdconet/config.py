"""Run configuration: one JSON document with a section per subsystem.

Every default below is the desk-scale value; ``swin_t_preset`` and
``full_trainer_preset`` give the full-size settings.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

CONFIG_VERSION = 1

DEFAULT_BETA = (0.6, 0.8, 1.0, 1.0)
DEFAULT_GAMMA = (1.0, 0.8, 0.6, 0.6, 0.4, 0.2)


@dataclass
class EncoderConfig:
    patch_size: int = 4
    window_size: int = 8
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    stage_channels: list[int] = field(default_factory=lambda: [24, 48, 96, 192])
    num_heads: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    mlp_ratio: float = 4.0

    def problems(self) -> list[str]:
        out = []
        if self.patch_size < 1:
            out.append("encoder.patch_size must be >= 1")
        if self.window_size < 1:
            out.append("encoder.window_size must be >= 1")
        for name in ("stage_depths", "stage_channels", "num_heads"):
            if len(getattr(self, name)) != 4:
                out.append(f"encoder.{name} must have 4 entries")
        if len(self.stage_channels) == 4:
            for s in range(3):
                if self.stage_channels[s + 1] != 2 * self.stage_channels[s]:
                    out.append("encoder.stage_channels must double at every stage")
                    break
        if len(self.stage_channels) == 4 and len(self.num_heads) == 4:
            for c, h in zip(self.stage_channels, self.num_heads):
                if h < 1 or c % h:
                    out.append(f"encoder: {c} channels not divisible by {h} heads")
        if any(d < 0 for d in self.stage_depths):
            out.append("encoder.stage_depths must be non-negative")
        return out


def swin_t_preset() -> EncoderConfig:
    """Full Swin-T widths and depths."""
    return EncoderConfig(
        patch_size=4,
        window_size=8,
        stage_depths=[2, 2, 6, 2],
        stage_channels=[96, 192, 384, 768],
        num_heads=[3, 6, 12, 24],
    )


@dataclass
class SRDecoderConfig:
    blocks_per_level: int = 1
    window_size: int = 8
    recon_channels: int = 16
    leaky_slope: float = 0.2
    # add the bicubic x2 upsampling of the LR input to the reconstruction
    global_residual: bool = True

    def problems(self) -> list[str]:
        out = []
        if self.blocks_per_level < 0:
            out.append("decoder_sr.blocks_per_level must be >= 0")
        if self.window_size < 1:
            out.append("decoder_sr.window_size must be >= 1")
        if self.recon_channels < 1:
            out.append("decoder_sr.recon_channels must be >= 1")
        return out


@dataclass
class SaliencyConfig:
    hidden_dim: int = 64
    sigma: float = 1.0 / 3.0
    alpha_init: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def problems(self) -> list[str]:
        out = []
        if self.hidden_dim < 4 or self.hidden_dim % 4:
            out.append("saliency.hidden_dim must be a positive multiple of 4")
        if not self.sigma > 0:
            out.append("saliency.sigma must be positive")
        return out


@dataclass
class FilterConfig:
    beta: list[float] = field(default_factory=lambda: list(DEFAULT_BETA))
    gamma: list[float] = field(default_factory=lambda: list(DEFAULT_GAMMA))
    background_embedding: bool = True
    max_rows: int = 256
    max_cols: int = 256

    def problems(self) -> list[str]:
        out = []
        if len(self.beta) != 4:
            out.append("filter.beta must have one ratio per pyramid level (4)")
        if not self.gamma:
            out.append("filter.gamma must be non-empty")
        for name in ("beta", "gamma"):
            for r in getattr(self, name):
                if not 0.0 < r <= 1.0:
                    out.append(f"filter.{name} entries must lie in (0, 1], got {r}")
        return out


@dataclass
class DetectorConfig:
    d_model: int = 64
    num_classes: int = 4
    num_queries: int = 50
    num_decoder_layers: int = 3
    num_heads: int = 8
    num_points: int = 4
    dim_feedforward: int = 256
    # loss weights (beta_cls, beta_bbox, beta_giou, beta_sa, beta_sr)
    weight_cls: float = 1.0
    weight_bbox: float = 5.0
    weight_giou: float = 2.0
    weight_sa: float = 1.0
    weight_sr: float = 1.0
    # Hungarian cost weights
    cost_class: float = 2.0
    cost_bbox: float = 5.0
    cost_giou: float = 2.0
    aux_loss: bool = True

    def problems(self) -> list[str]:
        out = []
        if self.d_model % 2 or self.d_model % self.num_heads:
            out.append("detector.d_model must be even and divisible by num_heads")
        if self.num_classes < 1:
            out.append("detector.num_classes must be >= 1")
        if self.num_queries < 1:
            out.append("detector.num_queries must be >= 1")
        if self.num_decoder_layers < 1:
            out.append("detector.num_decoder_layers must be >= 1")
        for name in ("weight_cls", "weight_bbox", "weight_giou", "weight_sa", "weight_sr"):
            if getattr(self, name) < 0:
                out.append(f"detector.{name} must be non-negative")
        return out


@dataclass
class TrainerConfig:
    eta_det_1: float = 1e-4
    eta_det_2: float = 1e-4
    eta_feat_1: float = 1e-4
    eta_feat_2: float = 1e-4
    backbone_lr_mult: float = 0.1
    rho: float = 0.1
    weight_decay: float = 1e-4
    T_det: int = 2
    T_tot: int = 6
    milestones: list[int] = field(default_factory=lambda: [4])
    lr_decay: float = 0.1
    batch_size: int = 2
    clip_norm: float = 0.1
    # passes over the dataset per epoch; >1 only for tiny overfit runs
    epoch_repeats: int = 1
    keep_last: int = 2
    snapshot_images: int = 16

    def problems(self) -> list[str]:
        out = []
        if not 0.0 < self.rho < 1.0:
            out.append("trainer.rho must lie in (0, 1)")
        if not 0 <= self.T_det < self.T_tot:
            out.append("trainer requires 0 <= T_det < T_tot")
        if not self.clip_norm > 0:
            out.append("trainer.clip_norm must be positive")
        for name in ("eta_det_1", "eta_det_2", "eta_feat_1", "eta_feat_2"):
            if not getattr(self, name) > 0:
                out.append(f"trainer.{name} must be positive")
        if self.batch_size < 1:
            out.append("trainer.batch_size must be >= 1")
        if self.epoch_repeats < 1:
            out.append("trainer.epoch_repeats must be >= 1")
        if sorted(self.milestones) != list(self.milestones):
            out.append("trainer.milestones must be sorted")
        return out


def full_trainer_preset() -> TrainerConfig:
    return TrainerConfig(T_det=16, T_tot=36, milestones=[30])


@dataclass
class DataConfig:
    count: int = 8
    canvas: int = 128
    min_objects: int = 2
    max_objects: int = 5
    min_size: int = 10
    max_size: int = 40
    clutter: float = 0.5
    tile_size: Optional[int] = None
    overlap: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.canvas < 8 or self.canvas % 2:
            out.append("data.canvas must be an even size >= 8")
        if not 0 <= self.min_objects <= self.max_objects:
            out.append("data requires 0 <= min_objects <= max_objects")
        if not 1 <= self.min_size <= self.max_size:
            out.append("data requires 1 <= min_size <= max_size")
        if self.tile_size is not None and not 0 <= self.overlap < self.tile_size:
            out.append("data requires 0 <= overlap < tile_size")
        return out


@dataclass
class EvalConfig:
    max_detections: int = 100
    fps_warmup: int = 5
    fps_runs: int = 50

    def problems(self) -> list[str]:
        return [] if self.max_detections >= 1 else ["eval.max_detections must be >= 1"]


_SECTIONS = {
    "encoder": EncoderConfig,
    "decoder_sr": SRDecoderConfig,
    "saliency": SaliencyConfig,
    "filter": FilterConfig,
    "detector": DetectorConfig,
    "trainer": TrainerConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_sr: SRDecoderConfig = field(default_factory=SRDecoderConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def problems(self) -> list[str]:
        out = []
        if self.config_version != CONFIG_VERSION:
            out.append(f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})")
        for name in _SECTIONS:
            out.extend(getattr(self, name).problems())
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        """Build a config from a (possibly partial) dict; unknown keys are errors.

        All schema problems are collected and raised together.
        """
        problems: list[str] = []
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in ("config_version", "seed"):
                if not isinstance(value, int) or isinstance(value, bool):
                    problems.append(f"{key} must be an integer")
                else:
                    kwargs[key] = value
            elif key in _SECTIONS:
                section_cls = _SECTIONS[key]
                if not isinstance(value, dict):
                    problems.append(f"section {key!r} must be an object")
                    continue
                names = {f.name for f in dataclasses.fields(section_cls)}
                unknown = sorted(set(value) - names)
                for u in unknown:
                    problems.append(f"unknown key {key}.{u}")
                kwargs[key] = section_cls(**{k: v for k, v in value.items() if k in names})
            else:
                problems.append(f"unknown key {key!r}")
        cfg = cls(**kwargs)
        try:
            problems.extend(cfg.problems())
        except TypeError as e:
            problems.append(f"wrongly typed value: {e}")
        if problems:
            raise ConfigError("; ".join(problems))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def replace(self, **sections: Any) -> "RunConfig":
        """Return a deep copy with whole sections or top-level fields replaced."""
        new = copy.deepcopy(self)
        for k, v in sections.items():
            setattr(new, k, v)
        return new
