"""Procedural real/fake corpus with planted, localised artifacts.

Real images are layered fields: a two-colour linear gradient, a few Gaussian
colour blobs, up to two flat sharp-edged objects and pixel noise of varying
strength.  A fake is a freshly rendered
real image with exactly one artifact planted inside a recorded box:

* ``checker``   -- additive high-frequency checkerboard,
* ``blend``     -- a foreign tint and grain layered over the box, hard boundary,
* ``copy_move`` -- a region of the same image pasted elsewhere with a
  brightness offset and resampling noise.

Everything is a pure function of ``(seed, n_per_class, size)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, FormatError, LayoutError
from .imaging import read_pnm, resize_bilinear, write_ppm

ARTIFACT_TYPES = ("checker", "blend", "copy_move")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
SPLITS = ("train", "val", "test")
REAL, FAKE = 0, 1

Box = tuple[int, int, int, int]


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    label: int
    id: str
    artifact_bbox: Box | None = None
    artifact_type: str | None = None


@dataclass
class Split:
    images: np.ndarray  # (n, 3, H, W)
    labels: np.ndarray  # (n,) int
    ids: list[str]
    bboxes: list[Box | None]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.images[idx], self.labels[idx], [self.ids[i] for i in idx],
                     [self.bboxes[i] for i in idx])


@dataclass
class CorpusManifest:
    seed: int | None
    image_size: int
    counts: dict[str, dict[str, int]]
    artifact_types: dict[str, int]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "image_size": self.image_size, "counts": self.counts,
                "artifact_types": self.artifact_types, "splits": self.splits}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        return cls(d.get("seed"), int(d["image_size"]), d["counts"], d.get("artifact_types", {}),
                   d.get("splits", {}))


@dataclass
class Corpus:
    items: list[LabeledImage]
    manifest: CorpusManifest
    splits: dict[str, Split]

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------
def render_real(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(3.0, 8.0)
        amp = rng.uniform(-0.35, 0.35, size=3)
        r2 = ((yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2)
        img = img + amp[:, None, None] * np.exp(-r2 / (2 * sigma ** 2))[None]
    for _ in range(rng.integers(0, 3)):  # flat objects with sharp outlines
        oy, ox = rng.uniform(0, size, size=2)
        r = rng.uniform(size / 10, size / 4)
        shape = ((yy * (size - 1) - oy) ** 2 + (xx * (size - 1) - ox) ** 2 <= r * r) if rng.uniform() < 0.5 else \
            ((np.abs(yy * (size - 1) - oy) <= r) & (np.abs(xx * (size - 1) - ox) <= r * rng.uniform(0.5, 1.5)))
        img = np.where(shape[None], rng.uniform(0.1, 0.9, size=3)[:, None, None], img)
    img = img + rng.normal(0.0, rng.uniform(0.005, 0.02), size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _random_box(rng: np.random.Generator, size: int) -> Box:
    lo, hi = max(3, round(size / 4)), max(4, round(size * 3 / 8))
    w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    x = int(rng.integers(0, size - w + 1))
    y = int(rng.integers(0, size - h + 1))
    return x, y, w, h


def plant_artifact(base: np.ndarray, rng: np.random.Generator, kind: str) -> tuple[np.ndarray, Box]:
    size = base.shape[-1]
    img = base.copy()
    x, y, w, h = box = _random_box(rng, size)
    region = img[:, y:y + h, x:x + w]
    if kind == "checker":
        period = int(rng.integers(2, 4))  # Sobel cancels on a period-1 checkerboard
        yy, xx = np.mgrid[0:h, 0:w]
        pattern = np.where(((yy // period) + (xx // period)) % 2 == 0, 1.0, -1.0)
        amp = rng.uniform(0.12, 0.25) * rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0, size=3)
        region = region + amp[:, None, None] * pattern[None]
    elif kind == "blend":
        # foreign tint + grain layered over the local content, hard boundary
        tint = rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.2, 0.4, size=3)
        grain = rng.normal(0.0, 0.15, size=region.shape)
        alpha = rng.uniform(0.4, 0.8)
        region = region + alpha * (tint[:, None, None] + grain)
    elif kind == "copy_move":
        for _ in range(20):
            sx = int(rng.integers(0, size - w + 1))
            sy = int(rng.integers(0, size - h + 1))
            if abs(sx - x) >= w // 2 or abs(sy - y) >= h // 2:
                break
        src = base[:, sy:sy + h, sx:sx + w]
        offset = rng.choice([-1.0, 1.0]) * rng.uniform(0.06, 0.12)
        region = src + offset + rng.normal(0.0, 0.08, size=src.shape)
    else:
        raise ConfigurationError(f"unknown artifact type {kind!r}")
    img[:, y:y + h, x:x + w] = np.clip(region, 0.0, 1.0)
    return img, box


def render_fake(seed_seq: np.random.SeedSequence, size: int) -> tuple[np.ndarray, np.ndarray, Box, str]:
    """Returns (pre-planting base, fake, bbox, artifact kind) for one seed."""
    rng = np.random.default_rng(seed_seq)
    base = render_real(rng, size)
    kind = ARTIFACT_TYPES[int(rng.integers(0, len(ARTIFACT_TYPES)))]
    fake, box = plant_artifact(base, rng, kind)
    return base, fake, box, kind


def _split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


def _assign_splits(items: list[LabeledImage], rng: np.random.Generator) -> dict[str, list[int]]:
    """Balanced, disjoint 70/15/15 split per class."""
    out: dict[str, list[int]] = {s: [] for s in SPLITS}
    for label in (REAL, FAKE):
        idx = [i for i, it in enumerate(items) if it.label == label]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        a, b, _ = _split_sizes(len(idx))
        out["train"] += idx[:a]
        out["val"] += idx[a:a + b]
        out["test"] += idx[a + b:]
    for s in SPLITS:
        out[s].sort()
    return out


def _build_splits(items: list[LabeledImage], index: dict[str, list[int]]) -> dict[str, Split]:
    splits = {}
    for name, idx in index.items():
        if idx:
            imgs = np.stack([items[i].pixels for i in idx])
        else:
            size = items[0].pixels.shape[-1]
            imgs = np.zeros((0, 3, size, size))
        splits[name] = Split(imgs, np.array([items[i].label for i in idx], dtype=np.int64),
                             [items[i].id for i in idx], [items[i].artifact_bbox for i in idx])
    return splits


def synth_generate(seed: int, n_per_class: int, size: int = 32, patch: int = 8) -> Corpus:
    if n_per_class < 2:
        raise ConfigurationError(f"n_per_class must be >= 2, got {n_per_class}")
    if size < 8 or size % patch:
        raise ConfigurationError(f"image size {size} must be >= 8 and divisible by patch size {patch}")
    root = np.random.SeedSequence(seed)
    real_seeds, fake_seeds, (split_seed,) = root.spawn(n_per_class), root.spawn(n_per_class), root.spawn(1)
    items: list[LabeledImage] = []
    for i, ss in enumerate(real_seeds):
        items.append(LabeledImage(render_real(np.random.default_rng(ss), size), REAL, f"real_{i:05d}"))
    kinds = {k: 0 for k in ARTIFACT_TYPES}
    for i, ss in enumerate(fake_seeds):
        _, fake, box, kind = render_fake(ss, size)
        kinds[kind] += 1
        items.append(LabeledImage(fake, FAKE, f"fake_{i:05d}", box, kind))
    index = _assign_splits(items, np.random.default_rng(split_seed))
    counts = {s: {"real": sum(items[i].label == REAL for i in idx), "fake": sum(items[i].label == FAKE for i in idx)}
              for s, idx in index.items()}
    manifest = CorpusManifest(seed, size, counts, kinds, {s: [items[i].id for i in idx] for s, idx in index.items()})
    return Corpus(items, manifest, _build_splits(items, index))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------
def write_corpus(corpus: Corpus, out) -> Path:
    """Write ``real/*.ppm``, ``fake/*.ppm``, ``bboxes.json`` and ``manifest.json``."""
    out = Path(out)
    (out / "real").mkdir(parents=True, exist_ok=True)
    (out / "fake").mkdir(parents=True, exist_ok=True)
    boxes = {}
    for it in corpus.items:
        sub = "fake" if it.label == FAKE else "real"
        write_ppm(out / sub / f"{it.id}.ppm", it.pixels)
        if it.artifact_bbox is not None:
            boxes[it.id] = {"bbox": list(it.artifact_bbox), "type": it.artifact_type}
    (out / "bboxes.json").write_text(json.dumps(boxes, indent=1, sort_keys=True))
    (out / "manifest.json").write_text(json.dumps(corpus.manifest.to_dict(), indent=1, sort_keys=True))
    return out


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in (".ppm", ".pgm", ".pnm"))


def load_dir(root, size: int = 32, seed: int = 0) -> Corpus:
    """Load ``root/real`` and ``root/fake`` PGM/PPM images.

    Images are resized to ``size`` (bilinear).  Splits come from
    ``manifest.json`` when present, otherwise a balanced seeded 70/15/15 split.
    """
    root = Path(root)
    dirs = {REAL: root / "real", FAKE: root / "fake"}
    for label, d in dirs.items():
        if not d.is_dir():
            raise LayoutError(f"missing subdirectory {d}")
    items: list[LabeledImage] = []
    boxes_path = root / "bboxes.json"
    boxes = json.loads(boxes_path.read_text()) if boxes_path.exists() else {}
    for label in (REAL, FAKE):
        files = _list_images(dirs[label])
        if not files:
            raise LayoutError(f"{dirs[label]} contains no PGM/PPM images (single-class corpora are rejected)")
        for f in files:
            try:
                px = read_pnm(f)
            except FormatError:
                raise
            except (OSError, ValueError) as exc:
                raise FormatError(f"{f}: {exc}") from exc
            src_hw = px.shape[1:]
            if src_hw != (size, size):
                px = np.clip(resize_bilinear(px, (size, size)), 0.0, 1.0)
            entry = boxes.get(f.stem)
            bbox = None
            if entry is not None and label == FAKE and src_hw == (size, size):
                bbox = tuple(int(v) for v in entry["bbox"])
            items.append(LabeledImage(px, label, f.stem, bbox, entry["type"] if entry else None))
    manifest_path = root / "manifest.json"
    by_id = {it.id: i for i, it in enumerate(items)}
    index = None
    manifest = None
    if manifest_path.exists():
        manifest = CorpusManifest.from_dict(json.loads(manifest_path.read_text()))
        if manifest.splits and all(i in by_id for s in manifest.splits.values() for i in s):
            index = {s: sorted(by_id[i] for i in manifest.splits.get(s, [])) for s in SPLITS}
    if index is None:
        index = _assign_splits(items, np.random.default_rng(seed))
    counts = {s: {"real": sum(items[i].label == REAL for i in idx), "fake": sum(items[i].label == FAKE for i in idx)}
              for s, idx in index.items()}
    kinds: dict[str, int] = {}
    for it in items:
        if it.artifact_type:
            kinds[it.artifact_type] = kinds.get(it.artifact_type, 0) + 1
    manifest = CorpusManifest(manifest.seed if manifest else None, size, counts, kinds,
                              {s: [items[i].id for i in idx] for s, idx in index.items()})
    return Corpus(items, manifest, _build_splits(items, index))


def require_both_classes(split: Split, name: str) -> None:
    if len(split) == 0 or len(np.unique(split.labels)) < 2:
        raise DegenerateInputError(f"split {name!r} must contain both classes")
