"""JSON run configuration shared by every CLI command."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .optim import ScheduleConfig
from .pipeline import POINT_RULES, FusionConfig
from .structures import TASKS
from .synth import ProposalNoise, SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    init_seed: int = 0


@dataclass
class ScheduleSection:
    base_lr: float = 1e-2
    warmup_steps: int = 1000
    clip_norm: float = 1.0
    momentum: float = 0.0


@dataclass
class SynthSection:
    num_images: int = 200
    image_size: list = field(default_factory=lambda: [64, 64])
    shapes_per_image: list = field(default_factory=lambda: [2, 5])
    shape_size: list = field(default_factory=lambda: [7, 14])
    band_probability: float = 0.5
    coarse_erosion: int = 2
    pixel_noise: float = 6.0
    min_visible: float = 0.6
    seed: int = 0
    jitter_sigma: float = 1.0
    corruption_rate: float = 0.3
    temperature: float = 0.25
    null_score: float = 0.01
    mask_sharpness: float = 0.5
    distractors: int = 0


@dataclass
class FusionSection:
    alpha: float = 0.4
    epsilon_floor: float = 1e-12


@dataclass
class TrainSection:
    annotation_sources: list = field(default_factory=lambda: ["fine"])
    points_per_image: int = 64
    epochs: int = 10
    batch_size: int = 1
    resample_points: bool = True
    seed: int = 0
    skip_scratch: bool = False


@dataclass
class EvalSection:
    point_rule: str = "highest"
    tasks: list = field(default_factory=lambda: list(TASKS))
    object_thresh: float = 0.8
    overlap_thresh: float = 0.8
    instance_score_thresh: float = 0.05
    pad_points: int = 64   # filler prompts per forward pass at inference; 0 disables
    seed: int = 0


SECTIONS = {"model": ModelSection, "schedule": ScheduleSection, "synth": SynthSection,
            "fusion": FusionSection, "train": TrainSection, "eval": EvalSection}


def _coerce(cls, name: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    section = cls()
    for key, value in raw.items():
        default = getattr(section, key)
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigError(f"{name}.{key}: expected {type(default).__name__}, got {value!r}")
        setattr(section, key, value)
    return section


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    synth: SynthSection = field(default_factory=SynthSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        cfg = cls(**{name: _coerce(sec, name, raw.get(name, {})) for name, sec in SECTIONS.items()})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        """Build every derived object once so bad values fail early."""
        try:
            self.synth_config()
            self.fusion_config()
            ModelConfig(num_classes=2, image_size=tuple(self.synth.image_size),
                        **{k: v for k, v in asdict(self.model).items() if k != "init_seed"})
            ScheduleConfig(total_steps=max(1, self.schedule.warmup_steps), **asdict(self.schedule))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.point_rule not in POINT_RULES:
            raise ConfigError(f"eval.point_rule must be one of {POINT_RULES}")
        if self.eval.pad_points < 0:
            raise ConfigError("eval.pad_points must be >= 0")
        bad = [t for t in self.eval.tasks if t not in TASKS]
        if bad:
            raise ConfigError(f"eval.tasks has unknown task(s) {bad}")

    # -- derived configs -------------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        s = self.synth
        noise = ProposalNoise(s.jitter_sigma, s.corruption_rate, s.temperature, s.null_score,
                              s.mask_sharpness, s.distractors)
        return SynthConfig(num_images=s.num_images, image_size=tuple(s.image_size),
                           shapes_per_image=tuple(s.shapes_per_image), shape_size=tuple(s.shape_size),
                           band_probability=s.band_probability, coarse_erosion=s.coarse_erosion,
                           pixel_noise=s.pixel_noise, min_visible=s.min_visible, seed=s.seed,
                           proposal_noise=noise)

    def model_config(self, num_classes: int, image_size: tuple) -> ModelConfig:
        m = self.model
        return ModelConfig(num_classes=num_classes, image_size=tuple(image_size), patch_size=m.patch_size,
                           embed_dim=m.embed_dim, depth=m.depth, heads=m.heads, mlp_ratio=m.mlp_ratio)

    def fusion_config(self, alpha: float | None = None) -> FusionConfig:
        return FusionConfig(self.fusion.alpha if alpha is None else alpha, self.fusion.epsilon_floor)

    def train_config(self, stage: str) -> TrainConfig:
        t, s = self.train, self.schedule
        sources = ("box",) if stage == "box" else tuple(t.annotation_sources)
        try:
            return TrainConfig(stage=stage, annotation_sources=sources, points_per_image=t.points_per_image,
                               epochs=t.epochs, batch_size=t.batch_size, base_lr=s.base_lr,
                               warmup_steps=s.warmup_steps, clip_norm=s.clip_norm, momentum=s.momentum,
                               resample_points=t.resample_points, seed=t.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **sections) -> "RunConfig":
        """``with_overrides(train={"epochs": 3})`` returns an updated copy."""
        raw = self.to_dict()
        for name, values in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section {name!r}")
            raw[name] = {**raw[name], **values}
        return RunConfig.from_dict(raw)


__all__ = ["ConfigError", "RunConfig", "SECTIONS", "replace"]
