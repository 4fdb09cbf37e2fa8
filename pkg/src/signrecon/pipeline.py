"""End-to-end orchestration behind the CLI subcommands.

Each function is reproducible from (config, seed) alone and safe to call
programmatically; the CLI is a thin argument-parsing layer on top.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .backbones import build_model, init_parameters
from .config import ExperimentConfig
from .data import (
    DatasetManifest,
    MaskParams,
    PhantomStyleSpec,
    SliceDataset,
    generate_synthetic_dataset,
    split_by_volume,
)
from .errors import ConfigError
from .evaluation import AblationSpec, MetricReport, evaluate, run_ablation
from .mri import gen_gaussian_mask
from .sideinfo import ContinuousStats
from .training import (
    Checkpoint,
    EpochRecord,
    TrainOutcome,
    finetune_sign,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

__all__ = [
    "run_gen_data",
    "prepare_datasets",
    "run_train",
    "model_from_checkpoint",
    "run_eval",
    "run_ablate",
    "run_mask_preview",
    "run_recon_dump",
]

logger = logging.getLogger(__name__)

PRETRAIN_CKPT = "checkpoint_pretrain.pt"
FINAL_CKPT = "checkpoint_final.pt"
METRICS_CSV = "metrics.csv"


def _require_empty_or_force(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(
            f"output directory {out_dir} is not empty; pass --force to overwrite"
        )


def run_gen_data(cfg: ExperimentConfig, out_dir, force: bool = False) -> Path:
    """Generate the synthetic styled dataset described by the config."""
    if cfg.data.kind != "synthetic":
        raise ConfigError("gen-data requires data.kind=synthetic")
    out_dir = Path(out_dir)
    _require_empty_or_force(out_dir, force)
    out_dir.mkdir(parents=True, exist_ok=True)
    generate_synthetic_dataset(
        out_dir,
        schema=cfg.schema,
        style=PhantomStyleSpec(),
        n_volumes=cfg.data.n_volumes,
        slices_per_volume=cfg.data.slices_per_volume,
        size=cfg.image_size,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
    )
    return out_dir / "manifest.json"


def prepare_datasets(
    cfg: ExperimentConfig, data_dir
) -> tuple[SliceDataset, SliceDataset, SliceDataset, ContinuousStats]:
    """Load the manifest, split by volume, compute training statistics."""
    data_dir = Path(data_dir)
    manifest_path = (
        data_dir / "manifest.json" if data_dir.is_dir() else data_dir
    )
    manifest = DatasetManifest.load(manifest_path)
    train_m, val_m, test_m = split_by_volume(manifest, cfg.data.split, seed=cfg.seed)
    train_ds = SliceDataset.from_manifest(train_m, cfg.image_size)
    val_ds = SliceDataset.from_manifest(val_m, cfg.image_size)
    test_ds = SliceDataset.from_manifest(test_m, cfg.image_size)
    stats = ContinuousStats.from_records(cfg.schema, train_ds.records)
    return train_ds, val_ds, test_ds, stats


def _write_metrics_csv(path: Path, history: list[EpochRecord], config_hash: str) -> None:
    lines = [f"# config_hash={config_hash}", "stage,epoch,split,loss,psnr_db,ssim"]
    for rec in history:
        lines.append(f"{rec.stage},{rec.epoch},train,{rec.train_loss!r},,")
        lines.append(
            f"{rec.stage},{rec.epoch},val,{rec.val_loss!r},{rec.val_psnr!r},{rec.val_ssim!r}"
        )
    path.write_text("\n".join(lines) + "\n")


def run_train(
    cfg: ExperimentConfig,
    data_dir,
    out_dir,
    stage: str = "both",
) -> dict:
    """Run the configured training stages and write checkpoints plus a
    metrics CSV. Returns artifact paths and final outcomes."""
    if stage not in ("both", "pretrain", "finetune"):
        raise ConfigError(f"stage must be both, pretrain or finetune, got {stage!r}")
    model_cfg = cfg.model.build_config()
    use_sign = cfg.model.norm == "sign"
    if stage == "finetune" and not use_sign:
        raise ConfigError("stage=finetune requires a SIGN model")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds, test_ds, stats = prepare_datasets(cfg, data_dir)
    config_dict = cfg.to_dict()
    config_hash = cfg.config_hash()

    model = build_model(model_cfg, cfg.schema)
    init_parameters(model, cfg.seed)

    history: list[EpochRecord] = []
    outcome: TrainOutcome | None = None

    if stage in ("both", "pretrain"):
        # Non-SIGN baselines have no second stage; give them the same
        # total epoch budget so A/B comparisons are optimisation-fair.
        epochs = cfg.train.pretrain_epochs
        if stage == "both" and not use_sign:
            epochs += cfg.train.finetune_epochs
        outcome = pretrain(
            model,
            train_ds,
            val_ds,
            cfg.train,
            cfg.mask,
            stats,
            epochs=epochs,
            config_dict=config_dict,
            config_hash=config_hash,
            out_dir=out_dir,
        )
        history.extend(outcome.history)
        save_checkpoint(outcome.best, out_dir / PRETRAIN_CKPT)
        if not (stage == "both" and use_sign):
            save_checkpoint(outcome.best, out_dir / FINAL_CKPT)

    if use_sign and stage in ("both", "finetune"):
        if stage == "finetune":
            start = load_checkpoint(out_dir / PRETRAIN_CKPT, expected_config_hash=config_hash)
        else:
            start = outcome.best
        ft = finetune_sign(
            model,
            train_ds,
            val_ds,
            cfg.train,
            cfg.mask,
            stats,
            from_checkpoint=start,
            config_dict=config_dict,
            config_hash=config_hash,
            out_dir=out_dir,
        )
        history.extend(ft.history)
        save_checkpoint(ft.best, out_dir / FINAL_CKPT)
        outcome = ft

    _write_metrics_csv(out_dir / METRICS_CSV, history, config_hash)
    return {
        "out_dir": out_dir,
        "final_checkpoint": out_dir / FINAL_CKPT,
        "pretrain_checkpoint": out_dir / PRETRAIN_CKPT,
        "metrics_csv": out_dir / METRICS_CSV,
        "history": history,
        "outcome": outcome,
        "test_size": len(test_ds),
    }


def model_from_checkpoint(cfg: ExperimentConfig, ckpt: Checkpoint):
    model = build_model(cfg.model.build_config(), cfg.schema)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


def run_eval(
    cfg: ExperimentConfig, data_dir, checkpoint_path, out_dir
) -> MetricReport:
    """Evaluate a checkpoint on the test split and write table artifacts."""
    config_hash = cfg.config_hash()
    ckpt = load_checkpoint(checkpoint_path, expected_config_hash=config_hash)
    _, _, test_ds, _ = prepare_datasets(cfg, data_dir)
    model = model_from_checkpoint(cfg, ckpt)
    report = evaluate(
        model,
        test_ds,
        ckpt.stats,
        cfg.mask,
        batch_size=cfg.eval_batch_size,
        seed=cfg.seed,
        model_name=cfg.name,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_csv(out_dir / "eval.csv", header_comment=f"config_hash={config_hash}")
    (out_dir / "eval.txt").write_text(report.to_table_text())
    (out_dir / "eval_per_image.csv").write_text(report.per_image_csv_text())
    return report


def run_ablate(
    cfg: ExperimentConfig, data_dir, checkpoint_path, out_dir
) -> dict[str, MetricReport]:
    """Label-quality and branch ablations on the test split."""
    config_hash = cfg.config_hash()
    ckpt = load_checkpoint(checkpoint_path, expected_config_hash=config_hash)
    _, _, test_ds, _ = prepare_datasets(cfg, data_dir)
    model = model_from_checkpoint(cfg, ckpt)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    for label, spec in (
        ("label_quality", AblationSpec.label_quality(cfg.schema)),
        ("drop_branch", AblationSpec.drop_single_branch(cfg.schema)),
        ("keep_branch", AblationSpec.keep_single_branch(cfg.schema)),
    ):
        report = run_ablation(
            model,
            test_ds,
            ckpt.stats,
            cfg.mask,
            spec,
            batch_size=cfg.eval_batch_size,
            seed=cfg.seed,
            model_name=cfg.name,
        )
        report.save_csv(
            out_dir / f"ablation_{label}.csv", header_comment=f"config_hash={config_hash}"
        )
        (out_dir / f"ablation_{label}.txt").write_text(report.to_table_text())
        reports[label] = report
    return reports


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def run_mask_preview(cfg: ExperimentConfig, out_path, seed: int | None = None) -> Path:
    """Render the configured sampling mask as a grayscale image."""
    mask = gen_gaussian_mask(
        cfg.image_size,
        cfg.mask.accel,
        cfg.mask.center_fraction,
        seed=cfg.seed if seed is None else seed,
        std_factor=cfg.mask.std_factor,
    )
    img = np.repeat(mask.columns[None, :].astype(np.float64), cfg.image_size, axis=0)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(_to_uint8(img), mode="L").save(out_path)
    return out_path


def run_recon_dump(
    cfg: ExperimentConfig,
    data_dir,
    checkpoint_path,
    out_dir,
    n: int = 4,
    baseline_checkpoint=None,
    baseline_config: ExperimentConfig | None = None,
) -> list[Path]:
    """Write side-by-side grids (ground truth | zero-filled | [baseline |]
    reconstruction) for the first n test slices."""
    ckpt = load_checkpoint(checkpoint_path, expected_config_hash=cfg.config_hash())
    _, _, test_ds, _ = prepare_datasets(cfg, data_dir)
    model = model_from_checkpoint(cfg, ckpt)
    baseline_model = None
    if baseline_checkpoint is not None:
        bcfg = baseline_config if baseline_config is not None else cfg
        bckpt = load_checkpoint(baseline_checkpoint, expected_config_hash=bcfg.config_hash())
        baseline_model = model_from_checkpoint(bcfg, bckpt)

    from .data import build_batches

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    written = 0
    with torch.no_grad():
        for batch in build_batches(
            test_ds,
            ckpt.stats,
            cfg.mask,
            batch_size=cfg.eval_batch_size,
            seed=cfg.seed,
            epoch=0,
            shuffle=False,
            fixed_masks=True,
        ):
            preds = model(batch).cpu().numpy()[:, 0]
            base_preds = (
                baseline_model(batch).cpu().numpy()[:, 0] if baseline_model is not None else None
            )
            zf = batch.zero_filled.cpu().numpy()[:, 0]
            tgt = batch.target.cpu().numpy()[:, 0]
            for i in range(preds.shape[0]):
                if written >= n:
                    return paths
                panels = [tgt[i], zf[i]]
                if base_preds is not None:
                    panels.append(base_preds[i])
                panels.append(preds[i])
                sep = np.ones((panels[0].shape[0], 2))
                row = panels[0]
                for p in panels[1:]:
                    row = np.concatenate([row, sep, p], axis=1)
                path = out_dir / f"recon_{written:03d}.png"
                PILImage.fromarray(_to_uint8(row), mode="L").save(path)
                paths.append(path)
                written += 1
    return paths
