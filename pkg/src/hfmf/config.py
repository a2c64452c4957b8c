"""Model dimension configuration shared by the backbones and both modules."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch: int = 8
    d: int = 64
    depth: int = 2
    cnn_channels: tuple[int, int, int] = (16, 32, 64)
    sep_channels: tuple[int, int, int] = (16, 32, 64)
    d_x: int = 64
    d_r: int = 64
    d_s: int = 64
    crop_size: int = 16
    n_context: int = 3
    m1_hidden: int = 32
    m2_hidden: int = 32
    ensemble_hidden: int = 16

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch size {self.patch}")
        if self.image_size % 8:
            raise ConfigurationError(f"image_size {self.image_size} must be divisible by 8")
        for name in ("patch", "d", "depth", "d_x", "d_r", "d_s", "crop_size", "n_context"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        c = self.cnn_channels
        if len(c) != 3 or not (0 < c[0] <= c[1] <= c[2]):
            raise ConfigurationError(f"cnn_channels must be 3 non-decreasing positives, got {c}")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        d["sep_channels"] = list(self.sep_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("cnn_channels", "sep_channels"):
            if key in kw:
                kw[key] = tuple(int(v) for v in kw[key])
        return cls(**kw)
