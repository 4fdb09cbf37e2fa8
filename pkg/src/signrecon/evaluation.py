"""Evaluation: metric reports, result tables and the ablation runner
(true vs random vs wrong vs masked side information)."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import MaskParams, SliceDataset, build_batches
from .errors import ConfigError
from .metrics import psnr, ssim
from .rng import substream_seed
from .sideinfo import ContinuousStats, SideInfoSchema, corrupt_side_info

__all__ = [
    "WORKERS_ENV_VAR",
    "PerImageMetric",
    "MetricRow",
    "MetricReport",
    "AblationCondition",
    "AblationSpec",
    "evaluate",
    "run_ablation",
]

WORKERS_ENV_VAR = "SIGNRECON_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PerImageMetric:
    key: str
    condition: str
    psnr: float
    ssim: float


@dataclass(frozen=True)
class MetricRow:
    model: str
    condition: str
    accel: float
    n_images: int
    psnr_mean: float
    ssim_mean: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    per_image: list[PerImageMetric] = field(default_factory=list)

    def row(self, condition: str) -> MetricRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def to_csv_text(self, header_comment: str | None = None) -> str:
        lines = []
        if header_comment:
            lines.append(f"# {header_comment}")
        lines.append("model,condition,accel,n_images,psnr_db,ssim")
        for r in self.rows:
            lines.append(
                f"{r.model},{r.condition},{r.accel!r},{r.n_images},{r.psnr_mean!r},{r.ssim_mean!r}"
            )
        return "\n".join(lines) + "\n"

    def per_image_csv_text(self) -> str:
        lines = ["key,condition,psnr_db,ssim"]
        for m in self.per_image:
            lines.append(f"{m.key},{m.condition},{m.psnr!r},{m.ssim!r}")
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        """Aligned text table: one row per (model, condition)."""
        headers = ("model", "condition", "accel", "n", "PSNR(dB)", "SSIM(%)")
        body = [
            (
                r.model,
                r.condition,
                f"{r.accel:g}x",
                str(r.n_images),
                f"{r.psnr_mean:.2f}",
                f"{100.0 * r.ssim_mean:.2f}",
            )
            for r in self.rows
        ]
        widths = [
            max(len(headers[c]), *(len(row[c]) for row in body)) if body else len(headers[c])
            for c in range(len(headers))
        ]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*headers), fmt.format(*("-" * w for w in widths))]
        lines.extend(fmt.format(*row) for row in body)
        return "\n".join(lines) + "\n"

    def save_csv(self, path, header_comment: str | None = None) -> None:
        Path(path).write_text(self.to_csv_text(header_comment))


@dataclass(frozen=True)
class AblationCondition:
    """One corruption condition. mode 'true' leaves records untouched."""

    mode: str  # true | random | wrong | mask
    fields: tuple[str, ...] = ()
    label: str | None = None

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.mode == "true":
            return "true"
        return f"{self.mode}({','.join(self.fields)})"


@dataclass(frozen=True)
class AblationSpec:
    conditions: tuple[AblationCondition, ...]

    def validate(self, schema: SideInfoSchema) -> None:
        for cond in self.conditions:
            if cond.mode not in ("true", "random", "wrong", "mask"):
                raise ConfigError(f"unknown ablation mode {cond.mode!r}")
            for f in cond.fields:
                if f not in schema.field_names:
                    raise ConfigError(f"ablation field {f!r} not in schema")
            if cond.mode in ("random", "wrong") and not cond.fields:
                raise ConfigError(f"mode {cond.mode!r} needs at least one field")

    @classmethod
    def label_quality(cls, schema: SideInfoSchema) -> "AblationSpec":
        """True vs randomly resampled vs deterministically wrong labels."""
        cats = schema.categorical_names
        return cls(
            conditions=(
                AblationCondition("true"),
                AblationCondition("random", cats, label="random"),
                AblationCondition("wrong", cats, label="wrong"),
            )
        )

    @classmethod
    def drop_single_branch(cls, schema: SideInfoSchema) -> "AblationSpec":
        """Mask one side-information branch at a time."""
        conds = [AblationCondition("true")]
        for name in schema.categorical_names:
            conds.append(AblationCondition("mask", (name,), label=f"mask-{name}"))
        if schema.n_continuous:
            conds.append(
                AblationCondition("mask", schema.continuous_fields, label="mask-continuous")
            )
        return cls(conditions=tuple(conds))

    @classmethod
    def keep_single_branch(cls, schema: SideInfoSchema) -> "AblationSpec":
        """Mask everything except one branch at a time."""
        branches: list[tuple[str, tuple[str, ...]]] = [
            (name, (name,)) for name in schema.categorical_names
        ]
        if schema.n_continuous:
            branches.append(("continuous", schema.continuous_fields))
        conds = [AblationCondition("true")]
        for keep_name, keep_fields in branches:
            masked = tuple(f for f in schema.field_names if f not in keep_fields)
            conds.append(AblationCondition("mask", masked, label=f"only-{keep_name}"))
        return cls(conditions=tuple(conds))


def _metric_pairs(
    targets: list[np.ndarray], preds: list[np.ndarray]
) -> list[tuple[float, float]]:
    workers = worker_count()
    if workers <= 1:
        return [(psnr(t, p), ssim(t, p)) for t, p in zip(targets, preds)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        ps = list(pool.map(psnr, targets, preds))
        ss = list(pool.map(ssim, targets, preds))
    return list(zip(ps, ss))


def _corrupted_dataset(
    dataset: SliceDataset, cond: AblationCondition, seed: int
) -> SliceDataset:
    if cond.mode == "true":
        return dataset
    records = [
        corrupt_side_info(
            rec,
            dataset.schema,
            cond.mode,
            cond.fields,
            seed=substream_seed(seed, "ablation", cond.name, i),
        )
        for i, rec in enumerate(dataset.records)
    ]
    return SliceDataset(
        schema=dataset.schema, images=dataset.images, records=records, keys=dataset.keys
    )


def evaluate(
    model: nn.Module,
    dataset: SliceDataset,
    stats: ContinuousStats,
    mask_params: MaskParams,
    *,
    batch_size: int = 8,
    seed: int = 0,
    model_name: str = "model",
    condition: AblationCondition = AblationCondition("true"),
) -> MetricReport:
    """Per-image PSNR/SSIM of a model on a split with fixed per-slice
    masks, aggregated to a mean row."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    ds = _corrupted_dataset(dataset, condition, seed)
    model.eval()
    targets, preds, keys = [], [], []
    with torch.no_grad():
        for batch in build_batches(
            ds,
            stats,
            mask_params,
            batch_size,
            seed=seed,
            epoch=0,
            shuffle=False,
            fixed_masks=True,
        ):
            pred = model(batch).detach().cpu().numpy()[:, 0]
            tgt = batch.target.detach().cpu().numpy()[:, 0]
            for i in range(pred.shape[0]):
                targets.append(tgt[i])
                preds.append(pred[i])
            keys.extend(batch.keys)
    pairs = _metric_pairs(targets, preds)
    per_image = [
        PerImageMetric(key=k, condition=condition.name, psnr=p, ssim=s)
        for k, (p, s) in zip(keys, pairs)
    ]
    row = MetricRow(
        model=model_name,
        condition=condition.name,
        accel=mask_params.accel,
        n_images=len(per_image),
        psnr_mean=float(np.mean([m.psnr for m in per_image])),
        ssim_mean=float(np.mean([m.ssim for m in per_image])),
    )
    return MetricReport(rows=[row], per_image=per_image)


def run_ablation(
    model: nn.Module,
    dataset: SliceDataset,
    stats: ContinuousStats,
    mask_params: MaskParams,
    spec: AblationSpec,
    *,
    batch_size: int = 8,
    seed: int = 0,
    model_name: str = "model",
) -> MetricReport:
    """Re-evaluate a frozen model under each corruption condition."""
    if not getattr(model, "use_sign", False):
        raise ConfigError("ablation requires a SIGN-enabled model")
    spec.validate(dataset.schema)
    report = MetricReport()
    for cond in spec.conditions:
        part = evaluate(
            model,
            dataset,
            stats,
            mask_params,
            batch_size=batch_size,
            seed=seed,
            model_name=model_name,
            condition=cond,
        )
        report.rows.extend(part.rows)
        report.per_image.extend(part.per_image)
    return report
