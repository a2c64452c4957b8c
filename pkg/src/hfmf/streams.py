"""Module 2: region, Sobel-texture and global streams, concatenated and classified.

The detector stage is a deterministic local-variance proposer: it scores a
fixed grid of candidate boxes by mean local (3x3) luminance variance and
returns the best box as the primary region plus the next non-overlapping
boxes as context.  Region crops and Sobel maps depend only on the pixels,
so :meth:`M2Model.prepare` computes them once per image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbones import SepConvNet, standardize
from .config import ModelConfig
from .errors import ConfigurationError, ContractError
from .imaging import luminance, resize_bilinear
from .nn import RELU_GAIN, Conv2d, Linear, MLPHead, Module
from .tensor import Tensor

Box = tuple[int, int, int, int]  # x, y, w, h

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
STREAMS = ("region", "sobel", "global")
EDGE_SCALE = 0.25


@dataclass
class EdgeMap:
    g: np.ndarray
    gx: np.ndarray
    gy: np.ndarray


@dataclass
class RegionSet:
    primary_region: Box
    context_regions: list[Box]
    saliency_scores: list[float]

    def to_dict(self) -> dict:
        return {"primary_region": list(self.primary_region),
                "context_regions": [list(b) for b in self.context_regions],
                "saliency_scores": list(self.saliency_scores)}


@dataclass
class StreamFeatures:
    f_region: Tensor | None
    f_sobel: Tensor | None
    f_global: Tensor | None
    fused: Tensor
    layout: dict[str, tuple[int, int]] = field(default_factory=dict)


def sobel(gray) -> EdgeMap:
    """Sobel gradients of an (H, W) image with replicate padding."""
    gray = np.asarray(gray.data if isinstance(gray, Tensor) else gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ContractError(f"sobel needs a 2-D image of at least 3x3, got shape {gray.shape}")
    p = np.pad(gray, 1, mode="edge")
    # separable form: central difference across, [1, 2, 1] smoothing along;
    # differences are taken first so flat fields give exact zeros
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return EdgeMap(np.sqrt(gx * gx + gy * gy), gx, gy)


def _local_variance(gray: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(np.pad(gray, 1, mode="edge"), (3, 3))
    return win.var(axis=(-1, -2))


def iou(a: Box, b: Box) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union else 0.0


def candidate_boxes(h: int, w: int, box: int, stride: int) -> list[Box]:
    return [(x, y, box, box) for y in range(0, h - box + 1, stride) for x in range(0, w - box + 1, stride)]


def region_extract(image, k: int = 3, box_frac: float = 0.375, stride: int = 2) -> RegionSet:
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    _, H, W = image.shape
    gray = luminance(image)
    var = _local_variance(gray)
    integral = np.pad(var.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    size = max(3, int(round(box_frac * min(H, W))))

    def score(b: Box) -> float:
        x, y, bw, bh = b
        s = integral[y + bh, x + bw] - integral[y, x + bw] - integral[y + bh, x] + integral[y, x]
        return float(s / (bw * bh))

    cands = candidate_boxes(H, W, size, stride)
    scores = np.array([score(b) for b in cands])
    order = np.argsort(-scores, kind="stable")  # raster order among ties
    top = float(scores.max())
    tied = top - float(scores.min()) <= 1e-12 * max(1.0, abs(top))
    if tied:
        primary = (W // 4, H // 4, W // 2, H // 2)
        primary_score = top
    else:
        primary = cands[order[0]]
        primary_score = top
    chosen: list[Box] = []
    chosen_scores: list[float] = []
    for i in order:
        if len(chosen) == k:
            break
        b = cands[i]
        if b == primary or any(iou(b, c) >= 0.5 for c in [primary] + chosen):
            continue
        chosen.append(b)
        chosen_scores.append(top if tied else float(scores[i]))
    for i in order:  # not enough non-overlapping boxes: fill by score
        if len(chosen) == k:
            break
        b = cands[i]
        if b != primary and b not in chosen:
            chosen.append(b)
            chosen_scores.append(top if tied else float(scores[i]))
    return RegionSet(primary, chosen, [primary_score] + chosen_scores)


def crop_resize(image: np.ndarray, box: Box, size: int) -> np.ndarray:
    x, y, w, h = box
    return resize_bilinear(image[:, y:y + h, x:x + w], (size, size))


class StreamEncoder(Module):
    """Two strided conv blocks, global average pool, linear projection."""

    def __init__(self, c_in: int, d_out: int, rng: np.random.Generator, width: tuple[int, int] = (16, 32)):
        self.conv1 = Conv2d(c_in, width[0], 3, rng, stride=2, gain=RELU_GAIN)
        self.conv2 = Conv2d(width[0], width[1], 3, rng, stride=2, gain=RELU_GAIN)
        self.proj = Linear(width[1], d_out, rng)

    def forward(self, x):
        h = T.relu(self.conv2(T.relu(self.conv1(x))))
        return self.proj(T.mean_pool(h, axis=(2, 3)))


class M2Model(Module):
    """Region + Sobel + global streams -> concat -> MLP -> 2 logits.

    ``streams`` selects a subset for ablations; the fused layout is always
    (region, sobel, global) restricted to the enabled streams.
    """

    kind = "m2"

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, streams=STREAMS):
        cfg = cfg or ModelConfig()
        streams = tuple(s for s in STREAMS if s in set(streams))
        if not streams or len(streams) != len(set(streams)):
            raise ConfigurationError(f"invalid stream selection {streams}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.streams = streams
        dims = {"region": cfg.d_r, "sobel": cfg.d_s, "global": cfg.d_x}
        if "region" in streams:
            self.region_encoder = StreamEncoder(3, cfg.d_r, rng)
        if "sobel" in streams:
            self.sobel_encoder = StreamEncoder(1, cfg.d_s, rng)
        if "global" in streams:
            self.global_net = SepConvNet(cfg, rng)
        self.layout: dict[str, tuple[int, int]] = {}
        off = 0
        for s in streams:
            self.layout[s] = (off, off + dims[s])
            off += dims[s]
        self.head = MLPHead(off, cfg.m2_hidden, 2, rng)

    @property
    def gradcam_layer(self) -> str | None:
        return "global_net.blocks.1" if "global" in self.streams else None

    def prepare(self, images: np.ndarray) -> tuple[np.ndarray, ...]:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        B = images.shape[0]
        c, k = self.cfg.crop_size, self.cfg.n_context
        primary = np.zeros((B, 3, c, c))
        context = np.zeros((B, k, 3, c, c))
        edges = np.zeros((B, 1) + images.shape[2:])
        for i, img in enumerate(images):
            if "region" in self.streams:
                rs = region_extract(img, k=k)
                primary[i] = crop_resize(img, rs.primary_region, c)
                for j, box in enumerate(rs.context_regions):
                    context[i, j] = crop_resize(img, box, c)
            if "sobel" in self.streams:
                edges[i, 0] = sobel(luminance(img)).g * EDGE_SCALE
        return primary, context, edges, images

    def encode_streams(self, primary, context, edges, images, activation: Tensor | None = None) -> StreamFeatures:
        parts: dict[str, Tensor] = {}
        if "region" in self.streams:
            context = T.as_tensor(context)
            B, k = context.shape[:2]
            ctx = self.region_encoder(standardize(T.reshape(context, (B * k,) + context.shape[2:])))
            ctx = T.mean(T.reshape(ctx, (B, k, -1)), axis=1)
            parts["region"] = self.region_encoder(standardize(primary)) + ctx
        if "sobel" in self.streams:
            parts["sobel"] = self.sobel_encoder(edges)
        if "global" in self.streams:
            feats = activation if activation is not None else self.global_features(images)
            parts["global"] = self.global_net.embed_from_features(feats)
        fused = T.concat([parts[s] for s in self.streams], axis=-1)
        return StreamFeatures(parts.get("region"), parts.get("sobel"), parts.get("global"), fused,
                              dict(self.layout))

    def global_features(self, images) -> Tensor:
        """Last conv block of the global stream (the Grad-CAM layer)."""
        return self.global_net.feature_map(standardize(images))

    def forward(self, primary, context, edges, images) -> Tensor:
        return self.head(self.encode_streams(primary, context, edges, images).fused)

    def forward_from_activation(self, activation: Tensor, primary, context, edges, images) -> Tensor:
        """Logits computed from a given global-stream feature map (Grad-CAM)."""
        return self.head(self.encode_streams(primary, context, edges, images, activation=activation).fused)


def encode_streams(model: M2Model, image) -> StreamFeatures:
    single = np.asarray(image).ndim == 3
    feats = model.encode_streams(*model.prepare(image))
    if not single:
        return feats

    def sq(t):
        return None if t is None else T.reshape(t, t.shape[1:])

    return StreamFeatures(sq(feats.f_region), sq(feats.f_sobel), sq(feats.f_global), sq(feats.fused),
                          feats.layout)


def m2_forward(model: M2Model, image) -> Tensor:
    single = np.asarray(image).ndim == 3
    out = model(*model.prepare(image))
    return T.reshape(out, (2,)) if single else out
