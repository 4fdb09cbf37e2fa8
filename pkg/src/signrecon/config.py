"""Experiment configuration: one file drives data generation, training,
evaluation and ablation. The config's content hash is recorded in every
artifact so A/B comparisons can be audited."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .backbones import D5C5Config, OUCRConfig
from .data import MaskParams
from .errors import ConfigError
from .mri import DCConfig
from .sideinfo import SideInfoSchema
from .training import TrainConfig

__all__ = ["DataConfig", "ModelSettings", "ExperimentConfig", "desk_preset", "full_preset"]


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # synthetic | manifest
    n_volumes: int = 12
    slices_per_volume: int = 8
    manifest: str | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.kind not in ("synthetic", "manifest"):
            raise ConfigError(f"data kind must be synthetic or manifest, got {self.kind!r}")
        if self.kind == "manifest" and not self.manifest:
            raise ConfigError("data.kind=manifest requires a manifest path")
        if self.kind == "synthetic" and (self.n_volumes < 3 or self.slices_per_volume < 1):
            raise ConfigError("synthetic data needs >= 3 volumes and >= 1 slice per volume")
        if len(self.split) != 3 or not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split ratios must be three values summing to 1, got {self.split}")


@dataclass(frozen=True)
class ModelSettings:
    backbone: str = "d5c5"  # d5c5 | oucr
    norm: str = "sign"  # sign | instance | none
    channels: int = 32
    n_cascades: int = 5
    convs_per_block: int = 5
    iterations: int = 5
    refine_depth: int = 3
    kernel_size: int = 3
    dc_lambda: float = math.inf

    def __post_init__(self):
        if self.backbone not in ("d5c5", "oucr"):
            raise ConfigError(f"backbone must be d5c5 or oucr, got {self.backbone!r}")

    def build_config(self):
        dc = DCConfig(lam=self.dc_lambda)
        if self.backbone == "d5c5":
            return D5C5Config(
                n_cascades=self.n_cascades,
                convs_per_block=self.convs_per_block,
                channels=self.channels,
                kernel_size=self.kernel_size,
                dc=dc,
                norm=self.norm,
            )
        return OUCRConfig(
            iterations=self.iterations,
            channels=self.channels,
            kernel_size=self.kernel_size,
            refine_depth=self.refine_depth,
            dc=dc,
            norm=self.norm,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    image_size: int = 64
    mask: MaskParams = field(default_factory=MaskParams)
    schema: SideInfoSchema = field(default_factory=SideInfoSchema)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval_batch_size: int = 8

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "seed": self.seed,
            "image_size": self.image_size,
            "mask": asdict(self.mask),
            "schema": self.schema.to_dict(),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "data": {**asdict(self.data), "split": list(self.data.split)},
            "eval_batch_size": self.eval_batch_size,
        }
        if math.isinf(d["model"]["dc_lambda"]):
            d["model"]["dc_lambda"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        model_d = dict(d.get("model", {}))
        lam = model_d.get("dc_lambda", "inf")
        model_d["dc_lambda"] = math.inf if lam in ("inf", None) else float(lam)
        data_d = dict(d.get("data", {}))
        if "split" in data_d:
            data_d["split"] = tuple(float(v) for v in data_d["split"])
        try:
            return cls(
                name=str(d.get("name", "experiment")),
                seed=int(d.get("seed", 0)),
                image_size=int(d.get("image_size", 64)),
                mask=MaskParams(**d.get("mask", {})),
                schema=(
                    SideInfoSchema.from_dict(d["schema"])
                    if "schema" in d
                    else SideInfoSchema()
                ),
                model=ModelSettings(**model_d),
                train=TrainConfig(**d.get("train", {})),
                data=DataConfig(**data_d),
                eval_batch_size=int(d.get("eval_batch_size", 8)),
            )
        except TypeError as exc:
            raise ConfigError(f"unrecognised config field: {exc}") from exc

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def save_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load_yaml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def with_model(self, **kwargs) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, **kwargs))


def desk_preset(norm: str = "sign", backbone: str = "d5c5", seed: int = 0) -> ExperimentConfig:
    """Small CPU-friendly preset: 64x64 images, narrow networks."""
    schema = SideInfoSchema(embed_dim=8)
    return ExperimentConfig(
        name=f"desk-{backbone}-{norm}",
        seed=seed,
        image_size=64,
        mask=MaskParams(accel=4.0, center_fraction=0.08),
        schema=schema,
        model=ModelSettings(
            backbone=backbone,
            norm=norm,
            channels=8,
            n_cascades=3,
            convs_per_block=3,
            iterations=3,
        ),
        train=TrainConfig(
            pretrain_epochs=30,
            finetune_epochs=10,
            lr_pretrain=1e-3,
            lr_finetune=1e-4,
            weight_decay=1e-7,
            batch_size=8,
            seed=seed,
        ),
        data=DataConfig(kind="synthetic", n_volumes=30, slices_per_volume=3),
    )


def full_preset(norm: str = "sign", backbone: str = "d5c5", seed: int = 0) -> ExperimentConfig:
    """Paper-scale preset (320x320); needs real data and long training."""
    return ExperimentConfig(
        name=f"full-{backbone}-{norm}",
        seed=seed,
        image_size=320,
        mask=MaskParams(accel=4.0, center_fraction=0.08),
        schema=SideInfoSchema(embed_dim=32),
        model=ModelSettings(backbone=backbone, norm=norm, channels=32),
        train=TrainConfig(
            pretrain_epochs=100,
            finetune_epochs=20,
            batch_size=8,
            seed=seed,
        ),
        data=DataConfig(kind="manifest", manifest="manifest.json"),
    )
