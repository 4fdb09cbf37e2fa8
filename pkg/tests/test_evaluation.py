import numpy as np
import pytest
import torch
from torch import nn

from signrecon.data import MaskParams, PhantomStyleSpec, SliceDataset, generate_synthetic_dataset
from signrecon.errors import ConfigError
from signrecon.evaluation import (
    WORKERS_ENV_VAR,
    AblationCondition,
    AblationSpec,
    evaluate,
    run_ablation,
)
from signrecon.metrics import PSNR_CAP_DB, psnr, ssim
from signrecon.mri import fft2c, gen_gaussian_mask, undersample, zero_filled_recon
from signrecon.rng import substream_seed
from signrecon.sideinfo import ContinuousStats, SideInfoSchema


class IdentityModel(nn.Module):
    use_sign = True

    def forward(self, batch):
        return batch.target


class ZeroFilledModel(nn.Module):
    use_sign = True

    def forward(self, batch):
        return batch.zero_filled


class SideInfoSensitiveModel(nn.Module):
    """Output depends on the categorical ids so corruption must change metrics."""

    use_sign = True

    def forward(self, batch):
        shift = batch.cat_ids.sum(dim=1).to(batch.target.dtype) * 0.01
        return batch.target + shift[:, None, None, None]


@pytest.fixture
def test_data(tmp_path):
    schema = SideInfoSchema(embed_dim=4)
    manifest = generate_synthetic_dataset(
        tmp_path / "ds",
        schema=schema,
        style=PhantomStyleSpec(),
        n_volumes=4,
        slices_per_volume=2,
        size=48,
        seed=0,
    )
    ds = SliceDataset.from_manifest(manifest, size=48)
    stats = ContinuousStats.from_records(schema, ds.records)
    return ds, stats


class TestEvaluate:
    def test_identity_model_capped(self, test_data):
        ds, stats = test_data
        report = evaluate(IdentityModel(), ds, stats, MaskParams(), seed=0)
        row = report.rows[0]
        assert row.psnr_mean == PSNR_CAP_DB
        assert row.ssim_mean == 1.0
        assert row.n_images == len(ds)

    def test_zero_filled_passthrough_matches_direct_computation(self, test_data):
        ds, stats = test_data
        seed = 3
        report = evaluate(ZeroFilledModel(), ds, stats, MaskParams(), seed=seed)
        expected_psnr, expected_ssim = [], []
        for i, img in enumerate(ds.images):
            mask = gen_gaussian_mask(
                img.shape[-1], 4.0, 0.08, seed=substream_seed(seed, "mask", i)
            )
            zf = zero_filled_recon(undersample(fft2c(img), mask))
            expected_psnr.append(psnr(img, zf.astype(np.float32)))
            expected_ssim.append(ssim(img, zf.astype(np.float32)))
        assert abs(report.rows[0].psnr_mean - np.mean(expected_psnr)) < 1e-4
        assert abs(report.rows[0].ssim_mean - np.mean(expected_ssim)) < 1e-5

    def test_empty_dataset_rejected(self, test_data):
        ds, stats = test_data
        empty = SliceDataset(schema=ds.schema, images=[], records=[], keys=[])
        with pytest.raises(ConfigError):
            evaluate(IdentityModel(), empty, stats, MaskParams())

    def test_worker_env_var_does_not_change_results(self, test_data, monkeypatch):
        ds, stats = test_data
        serial = evaluate(ZeroFilledModel(), ds, stats, MaskParams(), seed=1)
        monkeypatch.setenv(WORKERS_ENV_VAR, "2")
        parallel = evaluate(ZeroFilledModel(), ds, stats, MaskParams(), seed=1)
        assert serial.rows == parallel.rows
        assert serial.per_image == parallel.per_image


class TestAblation:
    def test_true_condition_bit_identical_to_evaluate(self, test_data):
        ds, stats = test_data
        model = SideInfoSensitiveModel()
        spec = AblationSpec(conditions=(AblationCondition("true"),))
        base = evaluate(model, ds, stats, MaskParams(), seed=2, model_name="m")
        abl = run_ablation(model, ds, stats, MaskParams(), spec, seed=2, model_name="m")
        assert abl.rows[0] == base.rows[0]
        assert abl.per_image == base.per_image

    def test_corruption_changes_metrics_of_sensitive_model(self, test_data):
        ds, stats = test_data
        model = SideInfoSensitiveModel()
        spec = AblationSpec.label_quality(ds.schema)
        report = run_ablation(model, ds, stats, MaskParams(), spec, seed=2)
        true_row = report.row("true")
        wrong_row = report.row("wrong")
        assert true_row.psnr_mean != wrong_row.psnr_mean

    def test_non_sign_model_rejected(self, test_data):
        ds, stats = test_data
        model = IdentityModel()
        model.use_sign = False
        with pytest.raises(ConfigError):
            run_ablation(model, ds, stats, MaskParams(), AblationSpec.label_quality(ds.schema))

    def test_spec_validation(self, test_data):
        ds, _ = test_data
        with pytest.raises(ConfigError):
            AblationSpec(conditions=(AblationCondition("bogus"),)).validate(ds.schema)
        with pytest.raises(ConfigError):
            AblationSpec(conditions=(AblationCondition("mask", ("nope",)),)).validate(ds.schema)
        with pytest.raises(ConfigError):
            AblationSpec(conditions=(AblationCondition("random"),)).validate(ds.schema)

    def test_builders_cover_branches(self, test_data):
        ds, _ = test_data
        schema = ds.schema
        s1 = AblationSpec.label_quality(schema)
        assert [c.name for c in s1.conditions] == ["true", "random", "wrong"]
        drop = AblationSpec.drop_single_branch(schema)
        assert len(drop.conditions) == 1 + schema.n_categorical + 1
        keep = AblationSpec.keep_single_branch(schema)
        # keep-one masks everything but one branch.
        only_contrast = keep.conditions[1]
        assert "contrast" not in only_contrast.fields
        assert set(only_contrast.fields) == set(schema.field_names) - {"contrast"}


class TestReportFormats:
    def test_csv_and_table(self, test_data):
        ds, stats = test_data
        report = evaluate(ZeroFilledModel(), ds, stats, MaskParams(), seed=0, model_name="zf")
        csv_text = report.to_csv_text(header_comment="config_hash=abc")
        assert csv_text.startswith("# config_hash=abc\n")
        assert "model,condition,accel,n_images,psnr_db,ssim" in csv_text
        table = report.to_table_text()
        assert "PSNR(dB)" in table and "zf" in table
        per_image = report.per_image_csv_text()
        assert per_image.count("\n") == len(ds) + 1
