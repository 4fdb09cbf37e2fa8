import numpy as np
import pytest
import torch

from signrecon.backbones import (
    CNNBlock,
    D5C5,
    D5C5Config,
    OUCR,
    OUCRConfig,
    ReconBatch,
    build_model,
    count_parameters,
    init_parameters,
)
from signrecon.errors import ConfigError, InvalidInputError
from signrecon.mri import (
    DCConfig,
    data_consistency,
    fft2c,
    gen_gaussian_mask,
    undersample,
    zero_filled_recon,
)
from signrecon.sideinfo import SideInfoSchema
from tests.test_sign import finite_diff_check


def small_schema(embed_dim=4):
    return SideInfoSchema(embed_dim=embed_dim)


def make_batch(rng, h=16, w=16, batch=2, schema=None, dtype=torch.float32, accel=2.0):
    schema = schema or small_schema()
    cdtype = torch.complex64 if dtype == torch.float32 else torch.complex128
    images, kspaces, masks = [], [], []
    for i in range(batch):
        img = rng.random((h, w))
        mask = gen_gaussian_mask(w, accel, 0.1, seed=100 + i)
        y = undersample(fft2c(img), mask)
        images.append(img)
        kspaces.append(y)
        masks.append(mask.columns)
    zf = np.stack([zero_filled_recon(k) for k in kspaces])
    n1 = schema.n_categorical
    cat_ids = torch.tensor(
        [[int(rng.integers(0, len(v))) for _, v in schema.categorical_fields] for _ in range(batch)],
        dtype=torch.int64,
    )
    return ReconBatch(
        zero_filled=torch.tensor(zf, dtype=dtype).unsqueeze(1),
        kspace=torch.tensor(np.stack(kspaces), dtype=cdtype),
        mask_cols=torch.tensor(np.stack(masks)),
        cat_ids=cat_ids,
        cont_z=torch.tensor(rng.standard_normal((batch, schema.n_continuous)), dtype=dtype),
        cont_masked=torch.zeros(batch, dtype=torch.bool),
        target=torch.tensor(np.stack(images), dtype=dtype).unsqueeze(1),
        records=(),
        keys=tuple(f"k{i}" for i in range(batch)),
    ), images, kspaces, masks


def zero_all_convs(model):
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()


class TestConfigs:
    def test_d5c5_validation(self):
        with pytest.raises(ConfigError):
            D5C5Config(convs_per_block=1)
        with pytest.raises(ConfigError):
            D5C5Config(norm="batch")
        with pytest.raises(ConfigError):
            D5C5Config(kernel_size=4)

    def test_oucr_validation(self):
        with pytest.raises(ConfigError):
            OUCRConfig(iterations=0)
        with pytest.raises(ConfigError):
            OUCRConfig(refine_depth=1)
        with pytest.raises(ConfigError):
            OUCRConfig(uc_depth=2)


class TestBlocks:
    def test_zero_weights_block_is_identity(self, rng):
        schema = small_schema()
        for norm in ("sign", "instance", "none"):
            cfg = D5C5Config(n_cascades=1, convs_per_block=3, channels=4, norm=norm)
            model = D5C5(cfg, schema)
            init_parameters(model, seed=0)
            zero_all_convs(model)
            block = model.blocks[0]
            x = torch.tensor(rng.random((2, 1, 8, 8)), dtype=torch.float32)
            enc = model.encode(
                make_batch(rng, 8, 8, 2, schema)[0]
            )
            out = block(x, enc)
            assert torch.allclose(out, x, atol=1e-7)

    def test_block_shape_oracle(self, rng):
        schema = small_schema()
        cfg = D5C5Config(n_cascades=1, convs_per_block=3, channels=4, norm="none")
        block = CNNBlock(cfg, schema.n_categorical + 1, schema.embed_dim)
        x = torch.randn(1, 1, 16, 16)
        assert block(x, None).shape == (1, 1, 16, 16)

    def test_missing_sign_inputs_rejected(self, rng):
        schema = small_schema()
        cfg = D5C5Config(n_cascades=1, convs_per_block=3, channels=4, norm="sign")
        block = CNNBlock(cfg, schema.n_categorical + 1, schema.embed_dim)
        with pytest.raises(ConfigError):
            block(torch.randn(1, 1, 8, 8), None)


class TestD5C5:
    def test_zero_convs_pure_dc(self, rng):
        schema = small_schema()
        cfg = D5C5Config(n_cascades=1, convs_per_block=3, channels=4, norm="none")
        model = D5C5(cfg, schema)
        init_parameters(model, 0)
        zero_all_convs(model)
        batch, images, kspaces, masks = make_batch(rng, 16, 16, 2, schema)
        out = model(batch).detach().numpy()[:, 0]
        for i in range(2):
            mask = gen_gaussian_mask(16, 2.0, 0.1, seed=100 + i)
            zf = zero_filled_recon(kspaces[i])
            expected = data_consistency(zf, kspaces[i], mask, DCConfig())
            assert np.abs(out[i] - expected).max() < 1e-5

    def test_single_cascade_compositional_oracle(self, rng):
        # One cascade must equal: block forward, then the NumPy reference DC.
        schema = small_schema()
        cfg = D5C5Config(n_cascades=1, convs_per_block=3, channels=4, norm="sign")
        model = D5C5(cfg, schema)
        init_parameters(model, 3)
        batch, images, kspaces, masks = make_batch(rng, 16, 16, 2, schema, dtype=torch.float64)
        model.double()
        out = model(batch).detach().numpy()[:, 0]
        enc = model.encode(batch)
        block_out = model.blocks[0](batch.zero_filled, enc).detach().numpy()[:, 0]
        for i in range(2):
            mask = gen_gaussian_mask(16, 2.0, 0.1, seed=100 + i)
            expected = data_consistency(block_out[i], kspaces[i], mask, DCConfig())
            assert np.abs(out[i] - expected).max() < 1e-8

    def test_identity_at_init_vs_instance_norm(self, rng):
        schema = small_schema()
        sign_cfg = D5C5Config(n_cascades=2, convs_per_block=3, channels=4, norm="sign")
        in_cfg = D5C5Config(n_cascades=2, convs_per_block=3, channels=4, norm="instance")
        sign_model = D5C5(sign_cfg, schema)
        in_model = D5C5(in_cfg, schema)
        init_parameters(sign_model, 7)
        init_parameters(in_model, 7)
        for trial in range(20):
            batch, *_ = make_batch(np.random.default_rng(trial), 16, 16, 2, schema)
            a = sign_model(batch)
            b = in_model(batch)
            assert (a - b).abs().max() < 1e-6

    def test_dc_invariance_premagnitude(self, rng):
        schema = small_schema()
        cfg = D5C5Config(n_cascades=3, convs_per_block=3, channels=4, norm="sign")
        model = D5C5(cfg, schema)
        init_parameters(model, 1)
        batch, _, kspaces, masks = make_batch(rng, 16, 16, 2, schema)
        _, merged_list = model(batch, collect_kspace=True)
        assert len(merged_list) == 3
        y = batch.kspace
        scale = y.abs().max()
        for merged in merged_list:
            m = batch.mask_cols[:, None, :].expand_as(merged)
            diff = (merged.masked_select(m) - y.masked_select(m)).abs().max()
            assert diff <= 1e-5 * scale

    def test_forward_determinism(self, rng):
        schema = small_schema()
        cfg = D5C5Config(n_cascades=2, convs_per_block=3, channels=4, norm="sign")
        a = D5C5(cfg, schema)
        b = D5C5(cfg, schema)
        init_parameters(a, 42)
        init_parameters(b, 42)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb
            assert torch.equal(pa, pb)
        batch, *_ = make_batch(rng, 16, 16, 2, schema)
        assert torch.equal(a(batch), b(batch))
        assert torch.equal(a(batch), a(batch))

    def test_init_seed_changes_parameters(self):
        schema = small_schema()
        cfg = D5C5Config(n_cascades=1, convs_per_block=3, channels=4, norm="sign")
        a = D5C5(cfg, schema)
        b = D5C5(cfg, schema)
        init_parameters(a, 1)
        init_parameters(b, 2)
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.state_dict().values(), b.state_dict().values())
        )


class TestOUCR:
    def test_zero_convs_dc_only(self, rng):
        schema = small_schema()
        cfg = OUCRConfig(iterations=1, channels=4, refine_depth=2, norm="none")
        model = OUCR(cfg, schema)
        init_parameters(model, 0)
        zero_all_convs(model)
        batch, _, kspaces, _ = make_batch(rng, 16, 16, 2, schema)
        out = model(batch).detach().numpy()[:, 0]
        for i in range(2):
            mask = gen_gaussian_mask(16, 2.0, 0.1, seed=100 + i)
            zf = zero_filled_recon(kspaces[i])
            once = data_consistency(zf, kspaces[i], mask, DCConfig())
            twice = data_consistency(once, kspaces[i], mask, DCConfig())
            assert np.abs(out[i] - twice).max() < 1e-5

    def test_shape_preservation(self, rng):
        schema = small_schema()
        cfg = OUCRConfig(iterations=2, channels=4, refine_depth=3, norm="sign")
        model = OUCR(cfg, schema)
        init_parameters(model, 5)
        batch, *_ = make_batch(rng, 32, 32, 1, schema)
        assert model(batch).shape == (1, 1, 32, 32)

    def test_identity_at_init_vs_instance_norm(self, rng):
        schema = small_schema()
        sign_model = OUCR(OUCRConfig(iterations=2, channels=4, norm="sign"), schema)
        in_model = OUCR(OUCRConfig(iterations=2, channels=4, norm="instance"), schema)
        init_parameters(sign_model, 9)
        init_parameters(in_model, 9)
        for trial in range(20):
            batch, *_ = make_batch(np.random.default_rng(1000 + trial), 16, 16, 2, schema)
            a = sign_model(batch)
            b = in_model(batch)
            assert (a - b).abs().max() < 1e-6

    def test_odd_size_rejected(self, rng):
        schema = small_schema()
        model = OUCR(OUCRConfig(iterations=1, channels=4, norm="none"), schema)
        init_parameters(model, 0)
        batch, *_ = make_batch(rng, 15, 16, 1, schema)
        with pytest.raises(ConfigError):
            model(batch)

    def test_dc_invariance_premagnitude(self, rng):
        schema = small_schema()
        model = OUCR(OUCRConfig(iterations=2, channels=4, norm="sign"), schema)
        init_parameters(model, 2)
        batch, *_ = make_batch(rng, 16, 16, 2, schema)
        _, merged_list = model(batch, collect_kspace=True)
        assert len(merged_list) == 3  # two iterations plus the refine DC
        y = batch.kspace
        scale = y.abs().max()
        for merged in merged_list:
            m = batch.mask_cols[:, None, :].expand_as(merged)
            diff = (merged.masked_select(m) - y.masked_select(m)).abs().max()
            assert diff <= 1e-5 * scale


class TestParameterCount:
    def test_single_conv(self):
        assert count_parameters(torch.nn.Conv2d(1, 8, 3)).total == 80

    def test_zero_layer_model(self):
        assert count_parameters(torch.nn.Module()).total == 0

    def test_d5c5_closed_form(self):
        schema = small_schema(embed_dim=8)
        cfg = D5C5Config(n_cascades=2, convs_per_block=3, channels=4, norm="sign")
        model = D5C5(cfg, schema)
        counts = count_parameters(model)

        c, k = cfg.channels, cfg.kernel_size
        conv_in = 1 * c * k * k + c
        conv_mid = c * c * k * k + c
        conv_out = c * 1 * k * k + 1
        convs_per_block = conv_in + (cfg.convs_per_block - 2) * conv_mid + conv_out
        n_branches = schema.n_categorical + 1
        branch_block = (schema.embed_dim * c + c) + 2 * c  # FC + LN gain/bias
        head = c * 2 * c + 2 * c
        sign_head = n_branches * branch_block + head
        sign_per_block = (cfg.convs_per_block - 1) * sign_head
        vocab_sizes = [len(v) for _, v in schema.categorical_fields]
        encoders = sum((s + 1) * schema.embed_dim for s in vocab_sizes) + (
            schema.n_continuous * schema.embed_dim + schema.embed_dim
        )

        assert counts.backbone == cfg.n_cascades * convs_per_block
        assert counts.sign_heads == cfg.n_cascades * sign_per_block
        assert counts.encoders == encoders
        assert counts.total == counts.backbone + counts.sign_heads + counts.encoders

    def test_build_model_factory(self):
        schema = small_schema()
        assert isinstance(build_model(D5C5Config(), schema), D5C5)
        assert isinstance(build_model(OUCRConfig(), schema), OUCR)
        with pytest.raises(ConfigError):
            build_model(object(), schema)


class TestEndToEndGradients:
    def test_one_cascade_d5c5_sign_gradcheck(self, rng):
        # 8x8 images, C=2, one cascade, all parameter groups, float64.
        schema = SideInfoSchema(embed_dim=4)
        cfg = D5C5Config(n_cascades=1, convs_per_block=3, channels=2, norm="sign")
        model = D5C5(cfg, schema).double()
        init_parameters(model, 13)
        gen = torch.Generator().manual_seed(77)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if "head" in name:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.3)
        batch, *_ = make_batch(rng, 8, 8, 2, schema, dtype=torch.float64)
        target = batch.target

        def loss_fn():
            out = model(batch)
            return ((out - target) ** 2).sum()

        params = list(model.parameters())
        assert sum(p.numel() for p in params) < 2000
        finite_diff_check(params, loss_fn, eps=1e-6, tol=1e-4)
