"""Module 1: hierarchical dot-product similarity (HDS) fusion of ViT tokens
with the CNN feature pyramid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbones import FeaturePyramid, TinyCNN, TinyViT, TokenMatrix, standardize
from .config import ModelConfig
from .errors import ConfigurationError, ContractError
from .nn import MLPHead, Module, param
from .tensor import Tensor

M1_VARIANTS = ("full", "vit_only", "cnn_only")


@dataclass
class FusionChain:
    z_low: Tensor
    z_mid: Tensor
    z_high: Tensor

    @property
    def v_final(self) -> Tensor:
        return self.z_high


def project_flatten(f, proj) -> Tensor:
    """Project channels C -> d at every position, then flatten positions in
    raster order: (C, H, W) -> (H*W, d), batched (B, C, H, W) -> (B, H*W, d)."""
    f = T.as_tensor(f)
    single = f.ndim == 3
    x = T.reshape(f, (1,) + f.shape) if single else f
    B, C, H, W = x.shape
    rows = T.transpose(T.reshape(x, (B, C, H * W)), (0, 2, 1))
    out = T.matmul(rows, proj)
    return T.reshape(out, out.shape[1:]) if single else out


def hds(q, kv) -> Tensor:
    """``softmax(q kv^T / sqrt(d)) kv`` -- keys and values are the same rows."""
    q, kv = T.as_tensor(q), T.as_tensor(kv)
    if q.shape[-1] != kv.shape[-1]:
        raise ContractError(f"hds: query dim {q.shape} and key dim {kv.shape} differ")
    if kv.shape[-2] < 1:
        raise ContractError("hds needs at least one key row")
    d = q.shape[-1]
    scores = T.matmul(q, T.swap_last(kv)) * (1.0 / math.sqrt(d))
    return T.matmul(T.softmax_rows(scores), kv)


def hierarchical_fuse(e_vit, projected: tuple[Tensor, Tensor, Tensor]) -> FusionChain:
    """Chain ``hds`` low -> mid -> high; each output is the next query.

    ``projected`` holds the pyramid levels already flattened to (H*W, d).
    """
    tokens = e_vit.tokens if isinstance(e_vit, TokenMatrix) else T.as_tensor(e_vit)
    f_low, f_mid, f_high = projected
    z_low = hds(tokens, f_low)
    z_mid = hds(z_low, f_mid)
    z_high = hds(z_mid, f_high)
    return FusionChain(z_low, z_mid, z_high)


class M1Model(Module):
    """ViT + CNN -> HDS chain -> token mean-pool -> MLP -> 2 logits.

    ``variant`` selects the ablation rows: ``vit_only`` pools ViT tokens,
    ``cnn_only`` pools the projected top pyramid level.
    """

    kind = "m1"

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, variant: str = "full"):
        if variant not in M1_VARIANTS:
            raise ConfigurationError(f"unknown M1 variant {variant!r}; expected one of {M1_VARIANTS}")
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.variant = variant
        if variant != "cnn_only":
            self.vit = TinyViT(cfg, rng)
        if variant != "vit_only":
            self.cnn = TinyCNN(cfg, rng)
            self.projs = [param(rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, cfg.d)))
                          for c in cfg.cnn_channels]
        self.head = MLPHead(cfg.d, cfg.m1_hidden, 2, rng)

    def project_pyramid(self, pyramid: FeaturePyramid) -> tuple[Tensor, Tensor, Tensor]:
        return tuple(project_flatten(f, w) for f, w in zip(pyramid.levels(), self.projs))

    def fuse(self, images) -> FusionChain:
        """HDS chain on already-standardized images."""
        return hierarchical_fuse(self.vit(images), self.project_pyramid(self.cnn(images)))

    def prepare(self, images: np.ndarray) -> tuple[np.ndarray, ...]:
        return (np.asarray(images, dtype=np.float64),)

    def forward(self, images) -> Tensor:
        images = standardize(images)
        if self.variant == "full":
            tokens = self.fuse(images).v_final
        elif self.variant == "vit_only":
            tokens = self.vit(images).tokens
        else:
            tokens = self.project_pyramid(self.cnn(images))[2]
        return self.head(T.mean_pool(tokens, axis=-2))


def m1_forward(model: M1Model, image) -> Tensor:
    return model(image)
