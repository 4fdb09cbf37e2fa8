"""Side information-guided normalisation (SIGN).

A SIGN head maps encoded side information to per-channel affine
parameters (gamma, beta). Each branch vector passes a fully-connected
layer, layer normalisation and ReLU; branches merge by element-wise
addition; a zero-initialised output head emits a 2C vector split into
(delta_gamma, beta) with gamma parameterised as 1 + delta_gamma. The
feature map is instance-standardised per sample and channel across its
spatial extent before the affine is applied, so a zero head makes SIGN
an exact unconditional instance norm.

Heads are per insertion site (not shared across layers); the side-info
encoders (embedding tables and the continuous linear map) are shared
across the whole network.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import InvalidInputError
from .sideinfo import SideInfoSchema

__all__ = [
    "EPS",
    "AffinePair",
    "EncodedSideInfo",
    "SideInfoEncoder",
    "VectorLayerNorm",
    "layer_norm",
    "SignHead",
    "sign_forward",
    "conditional_instance_norm",
    "PlainInstanceNorm2d",
    "SignNorm2d",
]

EPS = 1e-5


@dataclass(frozen=True)
class AffinePair:
    """Per-channel scale and shift, shape (B, C) each."""

    gamma: Tensor
    beta: Tensor


@dataclass(frozen=True)
class EncodedSideInfo:
    """Encoded branch vectors: one per categorical field plus the continuous one."""

    categorical_vectors: tuple[Tensor, ...]  # each (B, embed_dim)
    continuous_vector: Tensor  # (B, embed_dim)

    @property
    def branches(self) -> tuple[Tensor, ...]:
        return self.categorical_vectors + (self.continuous_vector,)

    @property
    def embed_dim(self) -> int:
        return int(self.continuous_vector.shape[-1])


class SideInfoEncoder(nn.Module):
    """Shared encoders: one embedding table per categorical field plus a
    linear map for the z-scored continuous vector.

    Each table carries one extra row for the reserved null id; its output
    is multiplied to exactly zero so masked branches contribute nothing
    and receive no gradient.
    """

    def __init__(self, schema: SideInfoSchema):
        super().__init__()
        self.schema = schema
        self.embeddings = nn.ModuleList(
            nn.Embedding(len(vocab) + 1, schema.embed_dim)
            for _, vocab in schema.categorical_fields
        )
        self.continuous = nn.Linear(schema.n_continuous, schema.embed_dim)

    def forward(
        self, cat_ids: Tensor, cont_z: Tensor, cont_masked: Tensor
    ) -> EncodedSideInfo:
        """cat_ids (B, n1) long; cont_z (B, n2); cont_masked (B,) bool."""
        if cat_ids.shape[1] != len(self.embeddings):
            raise InvalidInputError(
                f"expected {len(self.embeddings)} categorical ids, got {cat_ids.shape[1]}"
            )
        vectors = []
        for i, emb in enumerate(self.embeddings):
            ids = cat_ids[:, i]
            if int(ids.max()) >= emb.num_embeddings:
                raise InvalidInputError(f"categorical id out of range for field {i}")
            null_id = emb.num_embeddings - 1
            live = (ids != null_id).to(emb.weight.dtype).unsqueeze(1)
            vectors.append(emb(ids) * live)
        v_c = self.continuous(cont_z)
        live_c = (~cont_masked).to(v_c.dtype).unsqueeze(1)
        return EncodedSideInfo(tuple(vectors), v_c * live_c)


def layer_norm(v: Tensor, gain: Tensor, bias: Tensor, eps: float = EPS) -> Tensor:
    """Standardise across the last dimension (population std, eps on the
    std), then apply element-wise gain and bias."""
    mu = v.mean(dim=-1, keepdim=True)
    sigma = v.var(dim=-1, keepdim=True, unbiased=False).sqrt()
    return gain * (v - mu) / (sigma + eps) + bias


class VectorLayerNorm(nn.Module):
    """Layer normalisation over the last dimension with learned gain/bias."""

    def __init__(self, dim: int, eps: float = EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, v: Tensor) -> Tensor:
        return layer_norm(v, self.gain, self.bias, self.eps)


class SignHead(nn.Module):
    """One insertion site's SIGN sub-network.

    Per-branch block: Linear(embed_dim -> C) + LN + ReLU. The merged sum
    feeds a zero-initialised Linear(C -> 2C); the output splits into
    (delta_gamma, beta) and gamma = 1 + delta_gamma.
    """

    def __init__(self, n_branches: int, embed_dim: int, channels: int, eps: float = EPS):
        super().__init__()
        self.channels = channels
        self.branch_fc = nn.ModuleList(
            nn.Linear(embed_dim, channels) for _ in range(n_branches)
        )
        self.branch_ln = nn.ModuleList(
            VectorLayerNorm(channels, eps) for _ in range(n_branches)
        )
        self.head = nn.Linear(channels, 2 * channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, enc: EncodedSideInfo) -> AffinePair:
        branches = enc.branches
        if len(branches) != len(self.branch_fc):
            raise InvalidInputError(
                f"head built for {len(self.branch_fc)} branches, got {len(branches)}"
            )
        merged = None
        for v, fc, ln in zip(branches, self.branch_fc, self.branch_ln):
            if v.shape[-1] != fc.in_features:
                raise InvalidInputError(
                    f"branch vector dim {v.shape[-1]} != embed_dim {fc.in_features}"
                )
            out = torch.relu(ln(fc(v)))
            merged = out if merged is None else merged + out
        raw = self.head(merged)
        delta_gamma, beta = raw[:, : self.channels], raw[:, self.channels :]
        return AffinePair(gamma=1.0 + delta_gamma, beta=beta)


def sign_forward(enc: EncodedSideInfo, head: SignHead) -> AffinePair:
    """Functional alias for :meth:`SignHead.forward`."""
    return head(enc)


def conditional_instance_norm(h: Tensor, ab: AffinePair, eps: float = EPS) -> Tensor:
    """Per-sample, per-channel spatial standardisation followed by the
    conditional affine: gamma * (h - mu) / (sigma + eps) + beta.

    mu and sigma are the mean and population standard deviation over the
    spatial dimensions of each (sample, channel) slab.
    """
    if h.ndim != 4:
        raise InvalidInputError(f"expected a (B, C, H, W) feature map, got {h.shape}")
    if ab.gamma.shape[-1] != h.shape[1]:
        raise InvalidInputError(
            f"affine channel count {ab.gamma.shape[-1]} != feature channels {h.shape[1]}"
        )
    mu = h.mean(dim=(2, 3), keepdim=True)
    sigma = h.var(dim=(2, 3), keepdim=True, unbiased=False).sqrt()
    normed = (h - mu) / (sigma + eps)
    return ab.gamma[:, :, None, None] * normed + ab.beta[:, :, None, None]


class PlainInstanceNorm2d(nn.Module):
    """Unconditional instance norm with learned per-channel affine.

    Same standardisation formula as the SIGN path; gamma starts at one
    and beta at zero, so it matches a zero-initialised SIGN head exactly.
    """

    def __init__(self, channels: int, eps: float = EPS):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, h: Tensor) -> Tensor:
        b = h.shape[0]
        ab = AffinePair(
            gamma=self.gamma.unsqueeze(0).expand(b, -1),
            beta=self.beta.unsqueeze(0).expand(b, -1),
        )
        return conditional_instance_norm(h, ab, self.eps)


class SignNorm2d(nn.Module):
    """A SIGN head paired with the conditional instance norm it drives."""

    def __init__(self, n_branches: int, embed_dim: int, channels: int, eps: float = EPS):
        super().__init__()
        self.sign = SignHead(n_branches, embed_dim, channels, eps)
        self.eps = eps

    def forward(self, h: Tensor, enc: EncodedSideInfo) -> Tensor:
        return conditional_instance_norm(h, self.sign(enc), self.eps)
