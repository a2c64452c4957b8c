"""Small trainable stand-ins for the pretrained backbones.

* :class:`TinyViT` -- patch embedding + pre-norm transformer blocks.
* :class:`TinyCNN` -- three strided residual stages, tapped after each stage.
* :class:`SepConvNet` -- depthwise-separable conv stack with global pooling.

All forward passes accept a single image (3, H, W) or a batch (B, 3, H, W).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigurationError
from .nn import RELU_GAIN, Conv2d, LayerNorm, Linear, Module, param
from .tensor import Tensor


@dataclass
class TokenMatrix:
    tokens: Tensor  # (N, d) or (B, N, d)
    patch_size: int
    source_image_dims: tuple[int, int]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class FeaturePyramid:
    f1: Tensor
    f2: Tensor
    f3: Tensor

    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.f1, self.f2, self.f3


@dataclass
class Embedding:
    vector: Tensor  # (d_X,) or (B, d_X)


PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


def standardize(x):
    """Fixed pixel normalisation; the detectors apply it before every image encoder."""
    return (T.as_tensor(x) - PIXEL_MEAN) * (1.0 / PIXEL_STD)


def _batched(image) -> tuple[Tensor, bool]:
    image = T.as_tensor(image)
    if image.ndim == 3:
        return T.reshape(image, (1,) + image.shape), True
    return image, False


def patchify(image, p: int) -> Tensor:
    """(B, C, H, W) -> (B, N, C*p*p), patches in raster order, channel-major."""
    x, _ = _batched(image)
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ConfigurationError(f"image {H}x{W} not divisible by patch size {p}")
    x = T.reshape(x, (B, C, H // p, p, W // p, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (B, (H // p) * (W // p), C * p * p))


def patch_embed(image, p: int, proj: Linear, pos: Tensor | None = None) -> TokenMatrix:
    x, single = _batched(image)
    tokens = proj(patchify(x, p))
    if pos is not None:
        tokens = tokens + pos
    if single:
        tokens = T.reshape(tokens, tokens.shape[1:])
    return TokenMatrix(tokens, p, (x.shape[2], x.shape[3]))


class TransformerBlock(Module):
    """Pre-norm single-head self-attention + ReLU MLP, both residual."""

    def __init__(self, d: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(d)
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp_ratio * d, rng)
        self.fc2 = Linear(mlp_ratio * d, d, rng)
        self._scale = 1.0 / math.sqrt(d)
        self._last_attention: np.ndarray | None = None

    @property
    def last_attention(self) -> np.ndarray | None:
        return self._last_attention

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        att = T.softmax_rows(T.matmul(q, T.swap_last(k)) * self._scale)
        self._last_attention = att.data
        x = x + self.wo(T.matmul(att, v))
        return x + self.fc2(T.relu(self.fc1(self.ln2(x))))

    def zero_residual_branches(self) -> None:
        for lin in (self.wo, self.fc2):
            lin.weight.data = np.zeros_like(lin.weight.data)
            lin.bias.data = np.zeros_like(lin.bias.data)


class TinyViT(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        p = cfg.patch
        self.patch = p
        self.image_size = cfg.image_size
        self.proj = Linear(3 * p * p, cfg.d, rng)
        self.pos = param(rng.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.d)))
        self.blocks = [TransformerBlock(cfg.d, rng) for _ in range(cfg.depth)]

    def embed(self, image) -> TokenMatrix:
        return patch_embed(image, self.patch, self.proj, self.pos)

    def forward(self, image) -> TokenMatrix:
        x, single = _batched(image)
        if x.shape[2:] != (self.image_size, self.image_size):
            raise ConfigurationError(f"expected {self.image_size}x{self.image_size} input, got {x.shape[2:]}")
        tm = self.embed(x)
        h = tm.tokens
        for blk in self.blocks:
            h = blk(h)
        if single:
            h = T.reshape(h, h.shape[1:])
        return TokenMatrix(h, self.patch, tm.source_image_dims)


class ResidualStage(Module):
    """relu(conv3x3(relu(conv3x3_s2(x))) + conv1x1_s2(x))"""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=2)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1)
        self.skip = Conv2d(c_in, c_out, 1, rng, stride=2, padding=0)

    def conv_path(self, x):
        return self.conv2(T.relu(self.conv1(x)))

    def skip_path(self, x):
        return self.skip(x)

    def forward(self, x):
        return T.relu(self.conv_path(x) + self.skip_path(x))


class TinyCNN(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c1, c2, c3 = cfg.cnn_channels
        self.image_size = cfg.image_size
        self.stages = [ResidualStage(3, c1, rng), ResidualStage(c1, c2, rng), ResidualStage(c2, c3, rng)]

    def forward(self, image) -> FeaturePyramid:
        x, single = _batched(image)
        if x.shape[2:] != (self.image_size, self.image_size):
            raise ConfigurationError(f"expected {self.image_size}x{self.image_size} input, got {x.shape[2:]}")
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(T.reshape(x, x.shape[1:]) if single else x)
        return FeaturePyramid(*taps)


class SepConvBlock(Module):
    """Depthwise 3x3 (optionally strided) then pointwise 1x1, ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1, bias: bool = True):
        self.depthwise = Conv2d(c_in, c_in, 3, rng, stride=stride, groups=c_in, bias=bias, gain=1.0)
        self.pointwise = Conv2d(c_in, c_out, 1, rng, padding=0, bias=bias, gain=RELU_GAIN)

    def forward(self, x):
        return T.relu(self.pointwise(self.depthwise(x)))


class SepConvNet(Module):
    """Xception-style embedder. ``feature_map`` exposes the last conv block."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, bias: bool = True):
        s0, s1, s2 = cfg.sep_channels
        self.image_size = cfg.image_size
        self.stem = Conv2d(3, s0, 3, rng, bias=bias, gain=RELU_GAIN)
        self.blocks = [SepConvBlock(s0, s1, rng, stride=2, bias=bias),
                       SepConvBlock(s1, s2, rng, stride=2, bias=bias)]
        self.head = Linear(s2, cfg.d_x, rng, bias=bias)

    def feature_map(self, image) -> Tensor:
        x, _ = _batched(image)
        if x.shape[2:] != (self.image_size, self.image_size):
            raise ConfigurationError(f"expected {self.image_size}x{self.image_size} input, got {x.shape[2:]}")
        x = T.relu(self.stem(x))
        for blk in self.blocks:
            x = blk(x)
        return x

    def embed_from_features(self, feats: Tensor) -> Tensor:
        return self.head(T.mean_pool(feats, axis=(2, 3)))

    def forward(self, image) -> Embedding:
        single = T.as_tensor(image).ndim == 3
        v = self.embed_from_features(self.feature_map(image))
        return Embedding(T.reshape(v, v.shape[1:]) if single else v)


def tiny_vit_forward(vit: TinyViT, image) -> TokenMatrix:
    return vit(image)


def tiny_cnn_stages(cnn: TinyCNN, image) -> FeaturePyramid:
    return cnn(image)


def sepconv_embed(net: SepConvNet, image) -> Embedding:
    return net(image)
