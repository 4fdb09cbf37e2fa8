import json

import numpy as np
import pytest

from signrecon.data import (
    DatasetManifest,
    MaskParams,
    PhantomStyleSpec,
    SliceDataset,
    SliceEntry,
    VolumeEntry,
    build_batches,
    generate_synthetic_dataset,
    load_slice_array,
    preprocess,
    random_side_info,
    save_slice_array,
    split_by_volume,
    synth_phantom,
)
from signrecon.errors import ConfigError, DegenerateSliceError, InvalidInputError
from signrecon.rng import substream_rng
from signrecon.sideinfo import ContinuousStats, SideInfoRecord, SideInfoSchema


@pytest.fixture
def schema():
    return SideInfoSchema(embed_dim=4)


@pytest.fixture
def style():
    return PhantomStyleSpec()


class TestSliceArrayIO:
    def test_round_trip(self, tmp_path, rng):
        arr = rng.random((24, 36)).astype(np.float32)
        path = tmp_path / "a.f32"
        save_slice_array(path, arr)
        assert np.array_equal(load_slice_array(path), arr)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.f32"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 24)
        with pytest.raises(InvalidInputError):
            load_slice_array(path)

    def test_truncated_rejected(self, tmp_path, rng):
        path = tmp_path / "t.f32"
        save_slice_array(path, rng.random((8, 8)).astype(np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 12])
        with pytest.raises(InvalidInputError):
            load_slice_array(path)


class TestPreprocess:
    def test_rectangular_to_target_size(self, rng):
        out = preprocess(rng.random((400, 320)) + 0.1, size=320)
        assert out.shape == (320, 320)
        assert out.min() >= 0.0 and abs(out.max() - 1.0) < 1e-12

    def test_constant_image_unchanged(self):
        out = preprocess(np.ones((64, 64)), size=64)
        assert np.allclose(out, 1.0)

    def test_ramp_max_normalisation(self):
        ramp = np.linspace(0.1, 7.3, 64 * 64).reshape(64, 64)
        out = preprocess(ramp, size=64)
        assert out.min() >= 0.0
        assert out.max() == 1.0

    def test_idempotent_on_preprocessed(self, rng):
        raw = rng.random((100, 80)) + 0.05
        once = preprocess(raw, size=64)
        twice = preprocess(once, size=64)
        assert np.abs(twice - once).max() <= 1e-6

    def test_degenerate_slice_rejected(self):
        with pytest.raises(DegenerateSliceError):
            preprocess(np.zeros((64, 64)), size=64)

    def test_too_small_rejected(self):
        with pytest.raises(InvalidInputError):
            preprocess(np.ones((16, 16)), size=64)


def synthetic_manifest(tmp_path, schema, style, n_volumes=10, slices=2, size=48, seed=0):
    return generate_synthetic_dataset(
        tmp_path / "ds",
        schema=schema,
        style=style,
        n_volumes=n_volumes,
        slices_per_volume=slices,
        size=size,
        seed=seed,
    )


class TestSplit:
    def test_ten_volumes_811(self, tmp_path, schema, style):
        manifest = synthetic_manifest(tmp_path, schema, style)
        tr, va, te = split_by_volume(manifest, (0.8, 0.1, 0.1), seed=0)
        assert (len(tr.volumes), len(va.volumes), len(te.volumes)) == (8, 1, 1)

    def test_deterministic(self, tmp_path, schema, style):
        manifest = synthetic_manifest(tmp_path, schema, style)
        a = split_by_volume(manifest, seed=3)
        b = split_by_volume(manifest, seed=3)
        for ma, mb in zip(a, b):
            assert [v.volume_id for v in ma.volumes] == [v.volume_id for v in mb.volumes]

    def test_partition_is_exact(self, tmp_path, schema, style):
        manifest = synthetic_manifest(tmp_path, schema, style)
        tr, va, te = split_by_volume(manifest, seed=1)
        ids = [v.volume_id for m in (tr, va, te) for v in m.volumes]
        assert sorted(ids) == sorted(v.volume_id for v in manifest.volumes)
        assert len(set(ids)) == len(ids)

    def test_minimum_volumes_enforced(self, schema):
        manifest = DatasetManifest(schema=schema, volumes=tuple())
        with pytest.raises(ConfigError):
            split_by_volume(manifest)

    def test_small_sets_get_nonempty_splits(self, tmp_path, schema, style):
        manifest = synthetic_manifest(tmp_path, schema, style, n_volumes=3)
        tr, va, te = split_by_volume(manifest, seed=0)
        assert len(tr.volumes) >= 1 and len(va.volumes) >= 1 and len(te.volumes) >= 1


class TestPhantom:
    def test_deterministic_render(self, schema, style):
        rec = random_side_info(schema, substream_rng(0, "r"))
        a, _ = synth_phantom(rec, style, schema, size=48, seed=9)
        b, _ = synth_phantom(rec, style, schema, size=48, seed=9)
        assert np.array_equal(a, b)

    def test_contrast_changes_histogram(self, schema, style):
        base = random_side_info(schema, substream_rng(1, "r"))
        rec_a = SideInfoRecord((0,) + base.categorical_ids[1:], base.continuous_values, base.continuous_known)
        rec_b = SideInfoRecord((4,) + base.categorical_ids[1:], base.continuous_values, base.continuous_known)
        img_a, _ = synth_phantom(rec_a, style, schema, size=48, seed=5)
        img_b, _ = synth_phantom(rec_b, style, schema, size=48, seed=5)
        hist_a, _ = np.histogram(img_a, bins=32, range=(0, 1), density=True)
        hist_b, _ = np.histogram(img_b, bins=32, range=(0, 1), density=True)
        assert np.abs(hist_a - hist_b).sum() > 0.5

    def test_noise_std_matches_spec_within_20pct(self, schema, style):
        # Monte-Carlo over 100 renders, measured against the noise-free
        # render of the same seed on mid-intensity pixels (no clipping).
        unknown_id = schema.vocabulary("source").index("unknown")
        target_std = style.source_noise_std[unknown_id]
        silent = PhantomStyleSpec(source_noise_std=(0.0, 0.0, 0.0, 0.0))
        diffs = []
        for trial in range(100):
            rec = random_side_info(schema, substream_rng(trial, "mc"))
            rec = SideInfoRecord(
                rec.categorical_ids[:2] + (unknown_id,),
                rec.continuous_values,
                rec.continuous_known,
            )
            noisy, _ = synth_phantom(rec, style, schema, size=48, seed=trial)
            clean, _ = synth_phantom(rec, silent, schema, size=48, seed=trial)
            interior = (clean > 0.2) & (clean < 0.8)
            if interior.sum() > 50:
                diffs.append((noisy - clean)[interior])
        measured = np.concatenate(diffs).std()
        assert abs(measured - target_std) < 0.2 * target_std

    def test_unknown_source_noise_is_midrange(self, style):
        stds = style.source_noise_std
        assert min(stds) < stds[3] < max(stds)

    def test_learnable_by_design_r2(self, schema, style):
        # Linear regression one-hot side info -> mean intensity, 500 samples.
        feats, targets = [], []
        for i in range(500):
            rec = random_side_info(schema, substream_rng(i, "r2"))
            img, _ = synth_phantom(rec, style, schema, size=48, seed=10_000 + i)
            onehot = []
            for fi, (_, vocab) in enumerate(schema.categorical_fields):
                v = np.zeros(len(vocab))
                v[rec.categorical_ids[fi]] = 1.0
                onehot.append(v)
            cont = np.array(rec.continuous_values) / 1000.0
            feats.append(np.concatenate(onehot + [cont, [1.0]]))
            targets.append(img.mean())
        x = np.stack(feats)
        y = np.array(targets)
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
        pred = x @ coef
        ss_res = np.sum((y - pred) ** 2)
        ss_tot = np.sum((y - y.mean()) ** 2)
        r2 = 1.0 - ss_res / ss_tot
        assert r2 > 0.5, f"conditioning signal too weak: R^2 = {r2:.3f}"


class TestManifest:
    def test_save_load_round_trip(self, tmp_path, schema, style):
        manifest = synthetic_manifest(tmp_path, schema, style, n_volumes=3)
        loaded = DatasetManifest.load(tmp_path / "ds" / "manifest.json")
        assert [v.volume_id for v in loaded.volumes] == [v.volume_id for v in manifest.volumes]
        assert loaded.volumes[0].slices[0].record == manifest.volumes[0].slices[0].record

    def test_missing_file_rejected(self, tmp_path, schema, style):
        synthetic_manifest(tmp_path, schema, style, n_volumes=3)
        path = tmp_path / "ds" / "manifest.json"
        d = json.loads(path.read_text())
        d["volumes"][0]["slices"][0]["path"] = "arrays/nonexistent.f32"
        path.write_text(json.dumps(d))
        with pytest.raises(InvalidInputError):
            DatasetManifest.load(path)

    def test_duplicate_volume_ids_rejected(self, schema):
        vol = VolumeEntry("v0", tuple())
        with pytest.raises(InvalidInputError):
            DatasetManifest(schema=schema, volumes=(vol, vol))

    def test_regeneration_is_byte_identical(self, tmp_path, schema, style):
        generate_synthetic_dataset(
            tmp_path / "a", schema=schema, style=style, n_volumes=3, slices_per_volume=2, size=48, seed=4
        )
        generate_synthetic_dataset(
            tmp_path / "b", schema=schema, style=style, n_volumes=3, slices_per_volume=2, size=48, seed=4
        )
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (
            tmp_path / "b" / "manifest.json"
        ).read_bytes()
        assert (tmp_path / "a" / "arrays" / "vol000_s000.f32").read_bytes() == (
            tmp_path / "b" / "arrays" / "vol000_s000.f32"
        ).read_bytes()


class TestBuildBatches:
    def make_dataset(self, tmp_path, schema, style, n_slices=10):
        manifest = synthetic_manifest(tmp_path, schema, style, n_volumes=5, slices=2, size=48)
        ds = SliceDataset.from_manifest(manifest, size=48)
        assert len(ds) == n_slices
        stats = ContinuousStats.from_records(schema, ds.records)
        return ds, stats

    def test_batch_sizes(self, tmp_path, schema, style):
        ds, stats = self.make_dataset(tmp_path, schema, style)
        batches = list(build_batches(ds, stats, MaskParams(), batch_size=4, seed=0))
        assert [b.batch_size for b in batches] == [4, 4, 2]

    def test_kspace_zero_off_mask_over_epoch(self, tmp_path, schema, style):
        ds, stats = self.make_dataset(tmp_path, schema, style)
        for batch in build_batches(ds, stats, MaskParams(), batch_size=4, seed=0):
            ks = batch.kspace.numpy()
            cols = batch.mask_cols.numpy()
            for i in range(ks.shape[0]):
                assert np.all(ks[i][:, ~cols[i]] == 0)
                assert np.any(ks[i][:, cols[i]] != 0)

    def test_fixed_seed_first_batch_identical(self, tmp_path, schema, style):
        ds, stats = self.make_dataset(tmp_path, schema, style)
        a = next(iter(build_batches(ds, stats, MaskParams(), 4, seed=5, epoch=0)))
        b = next(iter(build_batches(ds, stats, MaskParams(), 4, seed=5, epoch=0)))
        assert np.array_equal(a.zero_filled.numpy(), b.zero_filled.numpy())
        assert np.array_equal(a.kspace.numpy(), b.kspace.numpy())
        assert a.keys == b.keys

    def test_epoch_changes_masks_but_fixed_masks_do_not(self, tmp_path, schema, style):
        ds, stats = self.make_dataset(tmp_path, schema, style)
        a = next(iter(build_batches(ds, stats, MaskParams(), 4, seed=5, epoch=0, shuffle=False)))
        b = next(iter(build_batches(ds, stats, MaskParams(), 4, seed=5, epoch=1, shuffle=False)))
        assert not np.array_equal(a.mask_cols.numpy(), b.mask_cols.numpy())
        fa = next(
            iter(build_batches(ds, stats, MaskParams(), 4, seed=5, epoch=0, shuffle=False, fixed_masks=True))
        )
        fb = next(
            iter(build_batches(ds, stats, MaskParams(), 4, seed=5, epoch=9, shuffle=False, fixed_masks=True))
        )
        assert np.array_equal(fa.mask_cols.numpy(), fb.mask_cols.numpy())
