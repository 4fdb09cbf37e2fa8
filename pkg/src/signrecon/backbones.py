"""Reconstruction backbones with optional SIGN conditioning.

Two cascaded networks operating on magnitude images:

* D5C5: interleaved CNN blocks (residual stacks of convolutions) and
  data-consistency layers.
* OUCR: a convolutional recurrent network with an under-complete branch
  (pooled features), an over-complete branch (upsampled features) and a
  refine tail, with data consistency inside the recurrence.

Each non-final convolution is followed by a normalisation slot that is
either a SIGN conditional instance norm, a plain learned instance norm,
or nothing, so the conditioning effect can be separated from the effect
of normalisation itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .errors import ConfigError, InvalidInputError
from .mri import DCConfig
from .rng import substream_seed
from .sideinfo import SideInfoRecord, SideInfoSchema
from .sign import (
    EncodedSideInfo,
    PlainInstanceNorm2d,
    SideInfoEncoder,
    SignHead,
    SignNorm2d,
    VectorLayerNorm,
)

__all__ = [
    "NORM_MODES",
    "ReconBatch",
    "D5C5Config",
    "OUCRConfig",
    "DataConsistencyLayer",
    "D5C5",
    "OUCR",
    "build_model",
    "init_parameters",
    "ParamCount",
    "count_parameters",
]

NORM_MODES = ("sign", "instance", "none")


def fft2c_t(x: Tensor) -> Tensor:
    """Centered orthonormal 2D FFT over the trailing two dimensions."""
    shifted = torch.fft.ifftshift(x, dim=(-2, -1))
    k = torch.fft.fft2(shifted, norm="ortho")
    return torch.fft.fftshift(k, dim=(-2, -1))


def ifft2c_t(k: Tensor) -> Tensor:
    shifted = torch.fft.ifftshift(k, dim=(-2, -1))
    x = torch.fft.ifft2(shifted, norm="ortho")
    return torch.fft.fftshift(x, dim=(-2, -1))


@dataclass
class ReconBatch:
    """Batch-aligned inputs for one reconstruction step."""

    zero_filled: Tensor  # (B, 1, H, W) real
    kspace: Tensor  # (B, H, W) complex, zero off-mask
    mask_cols: Tensor  # (B, W) bool
    cat_ids: Tensor  # (B, n1) long
    cont_z: Tensor  # (B, n2) real
    cont_masked: Tensor  # (B,) bool
    target: Tensor  # (B, 1, H, W) real
    records: tuple[SideInfoRecord, ...] = ()
    keys: tuple[str, ...] = ()

    def __post_init__(self):
        b = self.zero_filled.shape[0]
        for name in ("kspace", "mask_cols", "cat_ids", "cont_z", "cont_masked", "target"):
            t = getattr(self, name)
            if t.shape[0] != b:
                raise InvalidInputError(f"batch field {name} has inconsistent batch size")
        off = self.kspace.masked_select(~self.mask_cols[:, None, :].expand_as(self.kspace))
        if off.numel() and bool((off != 0).any()):
            raise InvalidInputError("measured k-space has nonzero entries off the mask")

    @property
    def batch_size(self) -> int:
        return int(self.zero_filled.shape[0])

    def to_double(self) -> "ReconBatch":
        return ReconBatch(
            zero_filled=self.zero_filled.double(),
            kspace=self.kspace.to(torch.complex128),
            mask_cols=self.mask_cols,
            cat_ids=self.cat_ids,
            cont_z=self.cont_z.double(),
            cont_masked=self.cont_masked,
            target=self.target.double(),
            records=self.records,
            keys=self.keys,
        )


@dataclass(frozen=True)
class D5C5Config:
    """Cascade of CNN blocks and DC layers."""

    n_cascades: int = 5
    convs_per_block: int = 5
    channels: int = 32
    kernel_size: int = 3
    dc: DCConfig = field(default_factory=DCConfig)
    norm: str = "sign"

    def __post_init__(self):
        if self.n_cascades < 1:
            raise ConfigError("n_cascades must be >= 1")
        if self.convs_per_block < 2:
            raise ConfigError("convs_per_block must be >= 2")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd to preserve shape")
        if self.norm not in NORM_MODES:
            raise ConfigError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")

    @property
    def use_sign(self) -> bool:
        return self.norm == "sign"


@dataclass(frozen=True)
class OUCRConfig:
    """Recurrent over/under-complete network with a refine tail."""

    iterations: int = 5
    channels: int = 32
    kernel_size: int = 3
    refine_depth: int = 3
    dc: DCConfig = field(default_factory=DCConfig)
    norm: str = "sign"
    # One pooling level down (under-complete) and one upsampling level
    # up (over-complete); other depths are not implemented.
    uc_depth: int = 1
    oc_depth: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.refine_depth < 2:
            raise ConfigError("refine_depth must be >= 2")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd to preserve shape")
        if self.norm not in NORM_MODES:
            raise ConfigError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")
        if self.uc_depth != 1 or self.oc_depth != 1:
            raise ConfigError("only single-level under/over-complete branches are supported")

    @property
    def use_sign(self) -> bool:
        return self.norm == "sign"


class DataConsistencyLayer(nn.Module):
    """Differentiable data consistency on magnitude images.

    Merges the prediction's spectrum with the measurements column-wise
    and returns the magnitude of the inverse transform. The merged
    k-space is exposed for consistency checks that must run before the
    magnitude step.
    """

    def __init__(self, dc: DCConfig):
        super().__init__()
        self.lam = dc.lam

    def merge_kspace(self, img: Tensor, kspace: Tensor, mask_cols: Tensor) -> Tensor:
        k = fft2c_t(img[:, 0].to(kspace.dtype) if img.is_complex() else img[:, 0])
        m = mask_cols[:, None, :]
        if math.isinf(self.lam):
            return torch.where(m, kspace, k)
        return torch.where(m, (k + self.lam * kspace) / (1.0 + self.lam), k)

    def forward(self, img: Tensor, kspace: Tensor, mask_cols: Tensor) -> Tensor:
        merged = self.merge_kspace(img, kspace, mask_cols)
        return ifft2c_t(merged).abs()[:, None]


class ConvNormAct(nn.Module):
    """conv -> (SIGN | instance norm | nothing) -> optional ReLU."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        norm: str,
        n_branches: int,
        embed_dim: int,
        act: bool = True,
    ):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size, padding=kernel_size // 2)
        if norm == "sign":
            self.norm = SignNorm2d(n_branches, embed_dim, c_out)
        elif norm == "instance":
            self.norm = PlainInstanceNorm2d(c_out)
        else:
            self.norm = None
        self.act = act

    def forward(self, x: Tensor, enc: EncodedSideInfo | None) -> Tensor:
        out = self.conv(x)
        if isinstance(self.norm, SignNorm2d):
            if enc is None:
                raise ConfigError("SIGN normalisation requires encoded side information")
            out = self.norm(out, enc)
        elif self.norm is not None:
            out = self.norm(out)
        if self.act:
            out = torch.relu(out)
        return out


class CNNBlock(nn.Module):
    """Residual stack of convolutions; norm after every conv but the last."""

    def __init__(self, cfg: D5C5Config, n_branches: int, embed_dim: int):
        super().__init__()
        layers = []
        for i in range(cfg.convs_per_block - 1):
            c_in = 1 if i == 0 else cfg.channels
            layers.append(
                ConvNormAct(c_in, cfg.channels, cfg.kernel_size, cfg.norm, n_branches, embed_dim)
            )
        self.layers = nn.ModuleList(layers)
        self.final_conv = nn.Conv2d(
            cfg.channels, 1, cfg.kernel_size, padding=cfg.kernel_size // 2
        )

    def forward(self, x: Tensor, enc: EncodedSideInfo | None) -> Tensor:
        out = x
        for layer in self.layers:
            out = layer(out, enc)
        return x + self.final_conv(out)


class _SignModelBase(nn.Module):
    """Shared plumbing: side-info encoding and the sanity checks."""

    def __init__(self, schema: SideInfoSchema, use_sign: bool):
        super().__init__()
        self.schema = schema
        self.use_sign = use_sign
        self.encoder = SideInfoEncoder(schema) if use_sign else None

    def encode(self, batch: ReconBatch) -> EncodedSideInfo | None:
        if self.encoder is None:
            return None
        return self.encoder(batch.cat_ids, batch.cont_z, batch.cont_masked)


class D5C5(_SignModelBase):
    def __init__(self, cfg: D5C5Config, schema: SideInfoSchema):
        super().__init__(schema, cfg.use_sign)
        self.cfg = cfg
        n_branches = schema.n_categorical + 1
        self.blocks = nn.ModuleList(
            CNNBlock(cfg, n_branches, schema.embed_dim) for _ in range(cfg.n_cascades)
        )
        self.dc = DataConsistencyLayer(cfg.dc)

    def forward(self, batch: ReconBatch, collect_kspace: bool = False):
        enc = self.encode(batch)
        x = batch.zero_filled
        merged_list = []
        for block in self.blocks:
            x = block(x, enc)
            merged = self.dc.merge_kspace(x, batch.kspace, batch.mask_cols)
            if collect_kspace:
                merged_list.append(merged)
            x = ifft2c_t(merged).abs()[:, None]
        if collect_kspace:
            return x, merged_list
        return x


class CRNNCell(nn.Module):
    """Convolutional recurrent cell: new state from input and previous state.

    The two convolutions merge additively before one norm slot, which is
    the closest per-layer reading the recurrent wiring admits.
    """

    def __init__(self, c_in: int, channels: int, kernel_size: int, norm: str,
                 n_branches: int, embed_dim: int):
        super().__init__()
        pad = kernel_size // 2
        self.conv_x = nn.Conv2d(c_in, channels, kernel_size, padding=pad)
        self.conv_h = nn.Conv2d(channels, channels, kernel_size, padding=pad, bias=False)
        if norm == "sign":
            self.norm = SignNorm2d(n_branches, embed_dim, channels)
        elif norm == "instance":
            self.norm = PlainInstanceNorm2d(channels)
        else:
            self.norm = None

    def forward(self, x: Tensor, h: Tensor, enc: EncodedSideInfo | None) -> Tensor:
        out = self.conv_x(x) + self.conv_h(h)
        if isinstance(self.norm, SignNorm2d):
            out = self.norm(out, enc)
        elif self.norm is not None:
            out = self.norm(out)
        return torch.relu(out)


class ResidualPair(nn.Module):
    """Two convolutions with a skip connection; norms on both convs."""

    def __init__(self, channels: int, kernel_size: int, norm: str,
                 n_branches: int, embed_dim: int):
        super().__init__()
        self.c1 = ConvNormAct(channels, channels, kernel_size, norm, n_branches, embed_dim)
        self.c2 = ConvNormAct(channels, channels, kernel_size, norm, n_branches, embed_dim, act=False)

    def forward(self, x: Tensor, enc: EncodedSideInfo | None) -> Tensor:
        return x + self.c2(self.c1(x, enc), enc)


class RecurrentBranch(nn.Module):
    """One OUCR branch: scale change, recurrent cell, residual pair,
    inverse scale change, two-conv decoder (last conv unnormalised)."""

    def __init__(self, cfg: OUCRConfig, n_branches: int, embed_dim: int, over: bool):
        super().__init__()
        self.over = over
        k = cfg.kernel_size
        self.enc_conv = ConvNormAct(1, cfg.channels, k, cfg.norm, n_branches, embed_dim)
        self.cell = CRNNCell(cfg.channels, cfg.channels, k, cfg.norm, n_branches, embed_dim)
        self.res = ResidualPair(cfg.channels, k, cfg.norm, n_branches, embed_dim)
        self.dec_conv = ConvNormAct(cfg.channels, cfg.channels, k, cfg.norm, n_branches, embed_dim)
        self.dec_final = nn.Conv2d(cfg.channels, 1, k, padding=k // 2)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def scale_in(self, x: Tensor) -> Tensor:
        return self.up(x) if self.over else self.pool(x)

    def scale_out(self, x: Tensor) -> Tensor:
        return self.pool(x) if self.over else self.up(x)

    def forward(self, x: Tensor, h: Tensor, enc: EncodedSideInfo | None):
        feat = self.enc_conv(x, enc)
        feat = self.scale_in(feat)
        h_new = self.cell(feat, h, enc)
        out = self.res(h_new, enc)
        out = self.scale_out(out)
        out = self.dec_conv(out, enc)
        return self.dec_final(out), h_new


class RefineBlock(nn.Module):
    """Stacked convolutions with ReLU; the last conv is unnormalised."""

    def __init__(self, cfg: OUCRConfig, n_branches: int, embed_dim: int):
        super().__init__()
        k = cfg.kernel_size
        layers = [ConvNormAct(1, cfg.channels, k, cfg.norm, n_branches, embed_dim)]
        for _ in range(cfg.refine_depth - 2):
            layers.append(ConvNormAct(cfg.channels, cfg.channels, k, cfg.norm, n_branches, embed_dim))
        self.layers = nn.ModuleList(layers)
        self.final_conv = nn.Conv2d(cfg.channels, 1, k, padding=k // 2)

    def forward(self, x: Tensor, enc: EncodedSideInfo | None) -> Tensor:
        out = x
        for layer in self.layers:
            out = layer(out, enc)
        return x + self.final_conv(out)


class OUCR(_SignModelBase):
    def __init__(self, cfg: OUCRConfig, schema: SideInfoSchema):
        super().__init__(schema, cfg.use_sign)
        self.cfg = cfg
        n_branches = schema.n_categorical + 1
        self.uc = RecurrentBranch(cfg, n_branches, schema.embed_dim, over=False)
        self.oc = RecurrentBranch(cfg, n_branches, schema.embed_dim, over=True)
        self.refine = RefineBlock(cfg, n_branches, schema.embed_dim)
        self.dc = DataConsistencyLayer(cfg.dc)

    def forward(self, batch: ReconBatch, collect_kspace: bool = False):
        b, _, h, w = batch.zero_filled.shape
        if h % 2 or w % 2:
            raise ConfigError(f"OUCR requires even spatial dimensions, got {h}x{w}")
        enc = self.encode(batch)
        x = batch.zero_filled
        dtype = x.dtype
        c = self.cfg.channels
        h_uc = torch.zeros(b, c, h // 2, w // 2, dtype=dtype, device=x.device)
        h_oc = torch.zeros(b, c, h * 2, w * 2, dtype=dtype, device=x.device)
        merged_list = []
        for _ in range(self.cfg.iterations):
            uc_out, h_uc = self.uc(x, h_uc, enc)
            oc_out, h_oc = self.oc(x, h_oc, enc)
            x = x + uc_out + oc_out
            merged = self.dc.merge_kspace(x, batch.kspace, batch.mask_cols)
            if collect_kspace:
                merged_list.append(merged)
            x = ifft2c_t(merged).abs()[:, None]
        x = self.refine(x, enc)
        merged = self.dc.merge_kspace(x, batch.kspace, batch.mask_cols)
        if collect_kspace:
            merged_list.append(merged)
        x = ifft2c_t(merged).abs()[:, None]
        if collect_kspace:
            return x, merged_list
        return x


def build_model(cfg, schema: SideInfoSchema) -> nn.Module:
    if isinstance(cfg, D5C5Config):
        return D5C5(cfg, schema)
    if isinstance(cfg, OUCRConfig):
        return OUCR(cfg, schema)
    raise ConfigError(f"unknown model config type {type(cfg).__name__}")


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic re-initialisation of every learnable parameter.

    Conv/linear weights and biases get the classic uniform
    (-1/sqrt(fan_in), 1/sqrt(fan_in)) init, embeddings standard normal,
    norm gains one and biases zero. SIGN output heads are re-zeroed last
    so conditioning starts as an exact identity.

    Each parameter is seeded from (seed, its qualified name), so modules
    shared between model variants (e.g. the convolutions of a SIGN model
    and its instance-norm baseline) receive identical values.
    """
    with torch.no_grad():
        for mod_name, module in model.named_modules():
            for p_name, p in module.named_parameters(recurse=False):
                full_name = f"{mod_name}.{p_name}" if mod_name else p_name
                gen = torch.Generator().manual_seed(
                    substream_seed(seed, "init", full_name)
                )
                if isinstance(module, nn.Conv2d):
                    fan_in = (
                        module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                    )
                    bound = 1.0 / math.sqrt(fan_in)
                    p.uniform_(-bound, bound, generator=gen)
                elif isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    p.uniform_(-bound, bound, generator=gen)
                elif isinstance(module, nn.Embedding):
                    p.normal_(0.0, 1.0, generator=gen)
                elif isinstance(module, (PlainInstanceNorm2d, VectorLayerNorm)):
                    if p_name in ("gamma", "gain"):
                        p.fill_(1.0)
                    else:
                        p.fill_(0.0)
        for module in model.modules():
            if isinstance(module, SignHead):
                module.head.weight.zero_()
                module.head.bias.zero_()


@dataclass(frozen=True)
class ParamCount:
    total: int
    backbone: int
    sign_heads: int
    encoders: int


def count_parameters(model: nn.Module) -> ParamCount:
    """Exact learnable scalar count, split by subsystem."""
    sign_ids, encoder_ids = set(), set()
    for module in model.modules():
        if isinstance(module, (SignHead, SignNorm2d)):
            sign_ids.update(id(p) for p in module.parameters())
        elif isinstance(module, SideInfoEncoder):
            encoder_ids.update(id(p) for p in module.parameters())
    total = backbone = sign_heads = encoders = 0
    for p in model.parameters():
        n = p.numel()
        total += n
        if id(p) in sign_ids:
            sign_heads += n
        elif id(p) in encoder_ids:
            encoders += n
        else:
            backbone += n
    return ParamCount(total=total, backbone=backbone, sign_heads=sign_heads, encoders=encoders)
