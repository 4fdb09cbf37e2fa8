"""Two-stage optimisation: joint pretraining of backbone plus SIGN with
a mean-absolute-error loss, then SIGN-only fine-tuning with the
convolutional parameters frozen. Also owns checkpointing.

All randomness derives from the config seed through named substreams
(init / mask / batch-order), so interrupted runs resume exactly and two
runs with the same seed produce identical parameters.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .backbones import ReconBatch, count_parameters
from .data import MaskParams, SliceDataset, build_batches
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    CheckpointVersionError,
    InvalidInputError,
    TrainingDivergedError,
)
from .metrics import psnr, ssim
from .sideinfo import ContinuousStats

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "mae_loss",
    "weight_decay_param_groups",
    "sign_parameters",
    "pretrain",
    "finetune_sign",
    "save_checkpoint",
    "load_checkpoint",
    "parameter_hash",
]

CKPT_MAGIC = "SIGNRECON-CKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 30
    finetune_epochs: int = 10
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-4
    weight_decay: float = 1e-7
    batch_size: int = 8
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.lr_pretrain < 0 or self.lr_finetune < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")


@dataclass
class Checkpoint:
    """Serializable training state; round-trips bit-exactly."""

    model_state: dict
    optimizer_state: dict | None
    config: dict | None
    config_hash: str | None
    epoch: int
    stage: str
    best_val_psnr: float
    stats: ContinuousStats
    root_seed: int

    def to_payload(self) -> dict:
        return {
            "magic": CKPT_MAGIC,
            "version": CKPT_VERSION,
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "config": self.config,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "stage": self.stage,
            "best_val_psnr": self.best_val_psnr,
            "stats": self.stats.to_dict(),
            "root_seed": self.root_seed,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "Checkpoint":
        return cls(
            model_state=payload["model_state"],
            optimizer_state=payload.get("optimizer_state"),
            config=payload.get("config"),
            config_hash=payload.get("config_hash"),
            epoch=int(payload["epoch"]),
            stage=str(payload["stage"]),
            best_val_psnr=float(payload["best_val_psnr"]),
            stats=ContinuousStats.from_dict(payload["stats"]),
            root_seed=int(payload["root_seed"]),
        )


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all pixels and batch entries."""
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def weight_decay_param_groups(model: nn.Module, weight_decay: float, lr: float):
    """Decay conv/linear/embedding weights only; biases and normalisation
    gains/biases are exempt (decaying them fights the identity init)."""
    decay, no_decay = [], []
    for module in model.modules():
        for name, p in module.named_parameters(recurse=False):
            if not p.requires_grad:
                continue
            if isinstance(module, (nn.Conv2d, nn.Linear, nn.Embedding)) and name == "weight":
                decay.append(p)
            else:
                no_decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay, "lr": lr},
        {"params": no_decay, "weight_decay": 0.0, "lr": lr},
    ]


def sign_parameters(model: nn.Module) -> list[nn.Parameter]:
    """Parameters of the conditioning pathway: side-info encoders plus
    every SIGN head (branch FCs, layer norms, output heads)."""
    from .sign import SideInfoEncoder, SignHead

    params = []
    seen = set()
    for module in model.modules():
        if isinstance(module, (SideInfoEncoder, SignHead)):
            for p in module.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
    return params


def parameter_hash(params: Sequence[Tensor]) -> str:
    """Stable content hash of a parameter list (order-sensitive)."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def conv_parameters(model: nn.Module) -> list[nn.Parameter]:
    sign_ids = {id(p) for p in sign_parameters(model)}
    return [p for p in model.parameters() if id(p) not in sign_ids]


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    val_loss: float
    val_psnr: float
    val_ssim: float


@dataclass
class TrainOutcome:
    best: Checkpoint
    last: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)


def _validate(
    model: nn.Module,
    dataset: SliceDataset,
    stats: ContinuousStats,
    mask_params: MaskParams,
    cfg: TrainConfig,
) -> tuple[float, float, float]:
    """Mean (loss, psnr, ssim) on a split with fixed per-slice masks."""
    model.eval()
    losses, psnrs, ssims = [], [], []
    with torch.no_grad():
        for batch in build_batches(
            dataset,
            stats,
            mask_params,
            cfg.batch_size,
            seed=cfg.seed,
            epoch=0,
            shuffle=False,
            fixed_masks=True,
        ):
            pred = model(batch)
            losses.append(float(mae_loss(pred, batch.target)))
            pred_np = pred.detach().cpu().numpy()[:, 0]
            tgt_np = batch.target.detach().cpu().numpy()[:, 0]
            for i in range(pred_np.shape[0]):
                psnrs.append(psnr(tgt_np[i], pred_np[i]))
                ssims.append(ssim(tgt_np[i], pred_np[i]))
    model.train()
    return float(np.mean(losses)), float(np.mean(psnrs)), float(np.mean(ssims))


def _dump_divergence(out_dir, stage: str, epoch: int, step: int, losses: list[float]) -> Path:
    out_dir = Path(out_dir) if out_dir is not None else Path.cwd()
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"divergence_{stage}_epoch{epoch}.json"
    path.write_text(
        json.dumps(
            {"stage": stage, "epoch": epoch, "step": step, "recent_losses": losses[-50:]},
            indent=2,
        )
    )
    return path


def _fit(
    model: nn.Module,
    train_ds: SliceDataset,
    val_ds: SliceDataset,
    cfg: TrainConfig,
    mask_params: MaskParams,
    stats: ContinuousStats,
    *,
    stage: str,
    epochs: int,
    lr: float,
    trainable: list[nn.Parameter] | None,
    config_dict: dict | None,
    config_hash: str | None,
    resume: Checkpoint | None,
    out_dir=None,
) -> TrainOutcome:
    if trainable is None:
        for p in model.parameters():
            p.requires_grad_(True)
    else:
        trainable_ids = {id(p) for p in trainable}
        for p in model.parameters():
            p.requires_grad_(id(p) in trainable_ids)

    optimizer = torch.optim.AdamW(weight_decay_param_groups(model, cfg.weight_decay, lr))

    start_epoch = 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        if resume.optimizer_state is not None and resume.stage == stage:
            optimizer.load_state_dict(resume.optimizer_state)
            start_epoch = resume.epoch
    model.train()

    def snapshot(epoch: int, best_psnr: float, with_opt: bool = True) -> Checkpoint:
        return Checkpoint(
            model_state=copy.deepcopy(model.state_dict()),
            optimizer_state=copy.deepcopy(optimizer.state_dict()) if with_opt else None,
            config=config_dict,
            config_hash=config_hash,
            epoch=epoch,
            stage=stage,
            best_val_psnr=best_psnr,
            stats=stats,
            root_seed=cfg.seed,
        )

    init_loss, init_psnr, _ = _validate(model, val_ds, stats, mask_params, cfg)
    best_psnr = init_psnr
    best = snapshot(start_epoch, best_psnr, with_opt=False)
    history: list[EpochRecord] = []
    step_losses: list[float] = []

    for epoch in range(start_epoch, epochs):
        step = 0
        epoch_losses = []
        for batch in build_batches(
            train_ds,
            stats,
            mask_params,
            cfg.batch_size,
            seed=cfg.seed,
            epoch=epoch,
            shuffle=True,
        ):
            optimizer.zero_grad()
            pred = model(batch)
            loss = mae_loss(pred, batch.target)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                path = _dump_divergence(out_dir, stage, epoch, step, step_losses)
                raise TrainingDivergedError(
                    f"non-finite loss at {stage} epoch {epoch} step {step}; "
                    f"diagnostics in {path}"
                )
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(
                    [p for p in model.parameters() if p.requires_grad], cfg.grad_clip
                )
            optimizer.step()
            epoch_losses.append(loss_val)
            step_losses.append(loss_val)
            step += 1
        val_loss, val_psnr, val_ssim = _validate(model, val_ds, stats, mask_params, cfg)
        history.append(
            EpochRecord(
                stage=stage,
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                val_loss=val_loss,
                val_psnr=val_psnr,
                val_ssim=val_ssim,
            )
        )
        if val_psnr >= best_psnr:
            best_psnr = val_psnr
            best = snapshot(epoch + 1, best_psnr, with_opt=False)

    last = snapshot(epochs, best_psnr)
    best.best_val_psnr = best_psnr
    return TrainOutcome(best=best, last=last, history=history)


def pretrain(
    model: nn.Module,
    train_ds: SliceDataset,
    val_ds: SliceDataset,
    cfg: TrainConfig,
    mask_params: MaskParams,
    stats: ContinuousStats,
    *,
    epochs: int | None = None,
    config_dict: dict | None = None,
    config_hash: str | None = None,
    resume: Checkpoint | None = None,
    out_dir=None,
) -> TrainOutcome:
    """Joint optimisation of every parameter group (backbone plus SIGN)."""
    return _fit(
        model,
        train_ds,
        val_ds,
        cfg,
        mask_params,
        stats,
        stage="pretrain",
        epochs=cfg.pretrain_epochs if epochs is None else epochs,
        lr=cfg.lr_pretrain,
        trainable=None,
        config_dict=config_dict,
        config_hash=config_hash,
        resume=resume,
        out_dir=out_dir,
    )


def finetune_sign(
    model: nn.Module,
    train_ds: SliceDataset,
    val_ds: SliceDataset,
    cfg: TrainConfig,
    mask_params: MaskParams,
    stats: ContinuousStats,
    *,
    from_checkpoint: Checkpoint | None = None,
    epochs: int | None = None,
    config_dict: dict | None = None,
    config_hash: str | None = None,
    out_dir=None,
) -> TrainOutcome:
    """Fine-tune only the conditioning pathway; convolutional parameters
    stay bit-identical."""
    if not getattr(model, "use_sign", False):
        raise ConfigError("finetune_sign requires a SIGN-enabled model")
    if from_checkpoint is not None:
        model.load_state_dict(from_checkpoint.model_state)
    trainable = sign_parameters(model)
    if not trainable:
        raise ConfigError("model exposes no SIGN parameters to fine-tune")
    return _fit(
        model,
        train_ds,
        val_ds,
        cfg,
        mask_params,
        stats,
        stage="finetune",
        epochs=cfg.finetune_epochs if epochs is None else epochs,
        lr=cfg.lr_finetune,
        trainable=trainable,
        config_dict=config_dict,
        config_hash=config_hash,
        resume=None,
        out_dir=out_dir,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.to_payload(), path)


def load_checkpoint(path, expected_config_hash: str | None = None) -> Checkpoint:
    """Load and validate a checkpoint.

    Structural damage (truncation, bad pickle, missing keys, wrong
    magic) raises CorruptCheckpointError; a magic/version match with a
    mismatched config hash or version raises CheckpointVersionError.
    """
    path = Path(path)
    if not path.exists():
        raise CorruptCheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CorruptCheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CKPT_MAGIC:
        raise CorruptCheckpointError(f"checkpoint {path} has no valid magic string")
    if payload.get("version") != CKPT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has version {payload.get('version')}, expected {CKPT_VERSION}"
        )
    try:
        ckpt = Checkpoint.from_payload(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"checkpoint {path} is missing fields: {exc}") from exc
    if expected_config_hash is not None and ckpt.config_hash != expected_config_hash:
        raise CheckpointVersionError(
            f"checkpoint {path} was produced by config {ckpt.config_hash}, "
            f"expected {expected_config_hash}"
        )
    return ckpt


def describe_model(model: nn.Module) -> str:
    counts = count_parameters(model)
    return (
        f"parameters: total={counts.total} backbone={counts.backbone} "
        f"sign_heads={counts.sign_heads} encoders={counts.encoders}"
    )
