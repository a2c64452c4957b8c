"""Parameter containers and basic layers built on the tensor engine."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``.

    Sub-modules may be attributes or lists of modules; names follow attribute
    paths (``blocks.0.attn.wq``), which is the key used by checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


FAN_IN_GAIN = float(1.0 / np.sqrt(3.0))  # +-1/sqrt(fan_in) bound
RELU_GAIN = float(np.sqrt(2.0))  # He gain for layers feeding a ReLU


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = FAN_IN_GAIN) -> Tensor:
    """Uniform init with standard deviation ``gain / sqrt(fan_in)``.

    The default gain gives the familiar +-1/sqrt(fan_in) bound; ``RELU_GAIN``
    is He initialisation, which keeps activation scale through deep ReLU stacks.
    """
    bound = gain * np.sqrt(3.0 / fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        lim = np.sqrt(1.0 / d_in)
        self.weight = param(rng.uniform(-lim, lim, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True, gain: float = FAN_IN_GAIN):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (c_in // groups) * k * k
        self.weight = fan_in_uniform(rng, (c_out, c_in // groups, k, k), fan_in, gain)
        self.bias = param(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        groups=self.groups)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def forward(self, x):
        mu = T.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.gamma + self.beta


class MLPHead(Module):
    """Two-layer perceptron ``d_in -> hidden -> d_out`` with ReLU."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(x)))
