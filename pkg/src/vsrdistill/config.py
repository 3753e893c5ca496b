"""Experiment configuration: nested dataclasses, strict dict/YAML loading, and ablation profiles."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from .discriminators import DiscriminatorConfig
from .errors import ConfigError
from .losses import CurationConfig, LossWeights
from .student import StudentConfig
from .teacher import TeacherKind
from .video import DegradationConfig

SEED_ENV = "AVSR_SEED"


@dataclass
class StageConfig:
    stage: int = 1
    iterations: int = 500
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    batch_clips: int = 4
    frames_per_clip: int = 5
    seed: int | None = None  # data stream seed; None derives it from the experiment seed
    grad_clip: float = 1.0  # global-norm clip for both players, 0 disables
    log_every: int = 10
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.batch_clips < 1 or self.frames_per_clip < 1:
            raise ConfigError("batch_clips and frames_per_clip must be >= 1")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")


def _stage1() -> StageConfig:
    # 2e-3: the desk student starts from random weights rather than a pretrained backbone
    return StageConfig(stage=1, iterations=500, lr_generator=2e-3)


def _stage2() -> StageConfig:
    # batch 2: the 256-channel discriminator tails dominate a stage-2 step on one CPU core
    return StageConfig(stage=2, iterations=300, lr_generator=1e-5, lr_discriminator=1e-4, batch_clips=2)


@dataclass
class ExperimentConfig:
    student: StudentConfig = field(default_factory=StudentConfig)
    d_pixel: DiscriminatorConfig = field(default_factory=lambda: DiscriminatorConfig(domain="pixel"))
    d_feature: DiscriminatorConfig = field(default_factory=lambda: DiscriminatorConfig(domain="feature"))
    use_pixel_disc: bool = True
    use_feature_disc: bool = True
    stage1: StageConfig = field(default_factory=_stage1)
    stage2: StageConfig = field(default_factory=_stage2)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    curation: CurationConfig = field(default_factory=CurationConfig)
    teacher: TeacherKind = field(default_factory=TeacherKind)
    image_pool_images: int = 32
    image_pool_size: tuple[int, int] = (96, 96)
    data_dir: str = ""
    stage1_checkpoint: str = ""
    seed: int = 0
    profile: str = "default"

    def validate(self) -> None:
        self.student.validate()
        self.d_pixel.validate()
        self.d_feature.validate()
        if self.d_pixel.domain != "pixel" or self.d_feature.domain != "feature":
            raise ConfigError("d_pixel/d_feature must keep their domains")
        self.stage1.validate()
        self.stage2.validate()
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ConfigError("stage1/stage2 blocks must declare stage 1 and 2")
        self.degradation.validate()
        if self.degradation.scale_factor != self.student.scale_factor:
            raise ConfigError("degradation and student scale factors differ")
        self.weights.validate()
        self.curation.validate()
        self.teacher.validate()
        if self.image_pool_images < 1:
            raise ConfigError("image_pool_images must be >= 1")

    def stage_cfg(self, stage: int) -> StageConfig:
        return self.stage1 if stage == 1 else self.stage2

    def data_seed(self, stage: int) -> int:
        sc = self.stage_cfg(stage)
        return sc.seed if sc.seed is not None else self.seed * 1000 + stage

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# strict loading


def _merge(obj: Any, data: dict, path: str = "") -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, where)
        elif isinstance(current, tuple):
            setattr(obj, key, tuple(value))
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected a boolean")
            setattr(obj, key, value)
        elif isinstance(current, float) and isinstance(value, (int, float)):
            setattr(obj, key, float(value))
        else:
            setattr(obj, key, value)
    return obj


def config_from_dict(data: dict, apply_env: bool = False) -> ExperimentConfig:
    data = dict(data)
    cfg = ExperimentConfig()
    apply_profile(cfg, data.pop("profile", "default"))
    _merge(cfg, data)
    if apply_env and os.environ.get(SEED_ENV):
        try:
            cfg.seed = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, profile: str | None = None, apply_env: bool = True) -> ExperimentConfig:
    data: dict = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if profile:
        data["profile"] = profile
    return config_from_dict(data, apply_env=apply_env)


# ---------------------------------------------------------------------------
# ablation profiles


def _split(d: int, c: int) -> Callable[[ExperimentConfig], None]:
    def apply(cfg):
        for dc in (cfg.d_pixel, cfg.d_feature):
            dc.head_split = (d, c)
            dc.tail_channels = d + c

    return apply


def _set(**paths) -> Callable[[ExperimentConfig], None]:
    def apply(cfg):
        for dotted, value in paths.items():
            parts = dotted.split("__")
            target = cfg
            for p in parts[:-1]:
                target = getattr(target, p)
            setattr(target, parts[-1], value)

    return apply


def _reference_hparams(cfg: ExperimentConfig) -> None:
    cfg.stage1.lr_generator = 1e-4
    cfg.stage1.grad_clip = 0.0
    cfg.stage2.grad_clip = 0.0
    cfg.stage2.lr_discriminator = 1e-7


def _no_adv(cfg: ExperimentConfig) -> None:
    cfg.weights.lambda_adv = 0.0
    cfg.use_pixel_disc = False
    cfg.use_feature_disc = False


PROFILES: dict[str, Callable[[ExperimentConfig], None]] = {
    "default": lambda cfg: None,
    # generator architecture
    "2d_only": _set(student__temporal_mode="none"),
    "2d_1d": lambda cfg: None,
    "temporal_doubled": _set(student__temporal_mode="conv_rb_doubled"),
    "temporal_attention": _set(student__temporal_mode="temporal_attention"),
    # discriminator layout
    "single_head": _split(256, 0),
    "single_domain": _set(use_pixel_disc=False),
    "split_100_0": _split(256, 0),
    "split_75_25": _split(192, 64),
    "split_50_50": _split(128, 128),
    "split_25_75": _split(64, 192),
    "split_0_100": _split(0, 256),
    # data curation
    "no_shuffled": _set(curation__include_shuffled_video=False, curation__include_assembled_images=False),
    "video_detail_real": _set(curation__video_detail_label=1),
    # training recipe
    "no_adv": _no_adv,
    "gt_teacher": _set(teacher__kind="gt_oracle", teacher__sigma=0.0),
    "reference_hparams": _reference_hparams,
}


def apply_profile(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; known: {', '.join(sorted(PROFILES))}")
    PROFILES[name](cfg)
    cfg.profile = name
    return cfg
