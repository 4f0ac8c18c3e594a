"""Pipeline configuration and the ablation presets.

Config files are YAML (JSON is valid YAML). Unknown keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import yaml

from .affordance import AffordanceConfig
from .encoders import ImageEncoderConfig, VideoEncoderConfig
from .errors import ConfigurationError
from .fusion import FusionConfig
from .head import HeadConfig
from .hotspot import HotspotConfig

ABLATION_ROWS = ("A", "B", "C", "D", "E")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 200
    batch_size: int = 8
    grad_clip: float = 5.0
    seed: int = 0
    log_every: int = 0
    schedule: str = "constant"  # or "cosine": decay to zero over the run
    warmup_steps: int = 0


@dataclass
class PipelineConfig:
    image_encoder: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    video_encoder: VideoEncoderConfig = field(default_factory=VideoEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    affordance: AffordanceConfig = field(default_factory=AffordanceConfig)
    hotspot: HotspotConfig = field(default_factory=HotspotConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    use_video: bool = True
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        self.image_encoder.validate()
        self.video_encoder.validate()
        self.fusion.validate()
        self.head.validate()
        self.affordance.validate()
        self.hotspot.validate()
        if self.fusion.d != self.image_encoder.d or self.head.d != self.image_encoder.d:
            raise ConfigurationError(
                f"fusion width {self.fusion.d} and head width {self.head.d} must equal image width {self.image_encoder.d}"
            )
        if self.head.levels != self.fusion.pyramid_levels:
            raise ConfigurationError("head.levels must equal fusion.pyramid_levels")
        if self.fusion.frames < self.video_encoder.frames:
            raise ConfigurationError("fusion.frames must cover video_encoder.frames")
        if self.train.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr schedule {self.train.schedule!r}")
        if self.train.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    def architecture(self) -> Dict[str, Any]:
        """Fields that determine parameter shapes; checkpoints must agree on these."""
        return {
            "image_encoder": {k: v for k, v in asdict(self.image_encoder).items() if k != "trainable"},
            "video_encoder": {k: v for k, v in asdict(self.video_encoder).items() if k != "trainable"},
            "fusion": {k: v for k, v in asdict(self.fusion).items() if k != "zero_init_out"},
            "head": {k: getattr(self.head, k) for k in ("d", "num_nouns", "num_verbs", "hidden", "levels")},
            "use_video": self.use_video,
        }

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def copy(self) -> "PipelineConfig":
        return copy.deepcopy(self)


def _build(cls, data: Dict[str, Any]):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{cls.__name__}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigurationError(f"{cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        default = names[key].default_factory if names[key].default_factory is not dataclasses.MISSING else None
        if default is not None and dataclasses.is_dataclass(default):
            kwargs[key] = _build(default, value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {})
    cfg.validate()
    return cfg


def load_config(path: Union[str, Path, None]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def ablation_config(row: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Config switches for the ablation ladder.

    A image only; B + video, mean pooling, sum fusion; C frame-guided
    pooling; D dual attention (single head); E multi-head everywhere.
    """
    if row not in ABLATION_ROWS:
        raise ConfigurationError(f"unknown ablation row {row!r}; expected one of {ABLATION_ROWS}")
    cfg = (base or PipelineConfig()).copy()
    cfg.use_video = row != "A"
    cfg.fusion.pooling = "mean" if row in ("A", "B") else "frame_guided"
    cfg.fusion.fusion = "dual" if row in ("D", "E") else "sum"
    cfg.fusion.use_multi_head = row == "E"
    cfg.validate()
    return cfg
