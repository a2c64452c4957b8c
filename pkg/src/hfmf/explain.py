"""Grad-CAM over the global stream of Module 2, plus overlap scoring and PGM export."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .imaging import bilinear_sample, resize_bilinear, write_pgm
from .tensor import Tensor

Box = tuple[int, int, int, int]


@dataclass
class Heatmap:
    values: np.ndarray  # (u, v), >= 0
    upsampled: np.ndarray  # (H, W)
    target_class: int
    weights: np.ndarray | None = None  # alpha_k per channel

    def sample(self, y, x):
        """Upsampled map evaluated at continuous image coordinates."""
        u, v = self.values.shape
        H, W = self.upsampled.shape
        return bilinear_sample(self.values, (np.asarray(y) + 0.5) * (u / H) - 0.5,
                               (np.asarray(x) + 0.5) * (v / W) - 0.5)


def cam_from(activations: np.ndarray, gradients: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``ReLU(sum_k alpha_k A_k)`` with ``alpha_k`` the spatial mean of dy/dA_k."""
    alpha = gradients.mean(axis=(1, 2))
    cam = np.tensordot(alpha, activations, axes=([0], [0]))
    return np.maximum(cam, 0.0), alpha


def gradcam(model, image, c: int) -> Heatmap:
    """Grad-CAM heatmap for class ``c`` on a single (3, H, W) image."""
    if getattr(model, "gradcam_layer", None) is None:
        raise ConfigurationError(f"{type(model).__name__} has no designated convolutional layer for Grad-CAM")
    if c not in (0, 1):
        raise ContractError(f"target class must be 0 or 1, got {c}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ContractError(f"gradcam expects a single (3, H, W) image, got {image.shape}")
    primary, context, edges, images = model.prepare(image)
    with T.no_grad():
        acts = model.global_features(images).data
    A = Tensor(acts, requires_grad=True)
    saved = [(p, p.grad) for p in model.parameters()]
    try:
        logits = model.forward_from_activation(A, primary, context, edges, images)
        T.backward(logits[0, c])
        grads = A.grad[0]
    finally:
        for p, g in saved:
            p.grad = g
    cam, alpha = cam_from(acts[0], grads)
    H, W = image.shape[1:]
    up = np.maximum(resize_bilinear(cam, (H, W)), 0.0)
    return Heatmap(cam, up, c, alpha)


def top_decile_mask(values: np.ndarray) -> np.ndarray:
    """Pixels whose value reaches the k-th largest value, k = ceil(10% of pixels).

    Ties at the threshold are all included, so a constant positive map
    selects every pixel.  Zero-heat pixels are never selected.
    """
    values = np.asarray(values, dtype=np.float64)
    flat = values.ravel()
    k = max(1, math.ceil(0.1 * flat.size))
    thresh = np.sort(flat)[::-1][k - 1]
    return (values >= thresh) & (values > 0)


def overlap_score(heatmap, bbox: Box) -> float:
    """Fraction of top-decile heatmap pixels that fall inside ``bbox`` (0 for an all-zero map)."""
    m = heatmap.upsampled if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    mask = top_decile_mask(m)
    total = mask.sum()
    if total == 0:
        return 0.0
    x, y, w, h = bbox
    return float(mask[y:y + h, x:x + w].sum() / total)


def random_box_baseline(heatmap, bbox: Box, n: int = 100, rng: np.random.Generator | None = None) -> float:
    """Mean overlap of ``n`` uniformly placed boxes with the same size as ``bbox``."""
    m = heatmap.upsampled if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    rng = rng or np.random.default_rng(0)
    H, W = m.shape
    _, _, w, h = bbox
    xs = rng.integers(0, W - w + 1, size=n)
    ys = rng.integers(0, H - h + 1, size=n)
    return float(np.mean([overlap_score(m, (int(x), int(y), w, h)) for x, y in zip(xs, ys)]))


def heatmap_bytes(values: np.ndarray) -> np.ndarray:
    """Max-normalise to 8 bits: ``min(255, floor(256 v / max))``; all-zero stays zero."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0):
        raise ContractError("heatmap values must be non-negative")
    top = v.max() if v.size else 0.0
    if top <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.minimum(255, np.floor(256.0 * v / top)).astype(np.uint8)


def export_heatmap(heatmap, path) -> None:
    """Write a heatmap (its upsampled map, or a raw 2-D array) as binary PGM."""
    m = heatmap.upsampled if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    try:
        write_pgm(path, heatmap_bytes(m))
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc}") from exc
