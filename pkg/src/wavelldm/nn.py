"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Attribute-registered tree of parameters and submodules.

    Parameter names are dotted paths (``encoder.stem.weight``), which is also
    how they are keyed in checkpoints.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, dilation=1, groups=1, bias=True, *, rng):
        fan_in = c_in // groups * kernel_size
        self.weight = Parameter(_uniform(rng, (c_out, c_in // groups, kernel_size), fan_in))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in)) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x):
        return F.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class ConvTranspose1d(Module):
    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, groups=1, bias=True, *, rng):
        fan_in = c_out // groups * kernel_size
        self.weight = Parameter(_uniform(rng, (c_in, c_out // groups, kernel_size), fan_in))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x):
        return F.conv_transpose1d(x, self.weight, self.bias, self.stride, self.padding, groups=self.groups)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, groups=1, bias=True, *, rng):
        kh, kw = F._pair(kernel_size)
        fan_in = c_in // groups * kh * kw
        self.weight = Parameter(_uniform(rng, (c_out, c_in // groups, kh, kw), fan_in))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, 1, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, bias=True, *, rng):
        kh, kw = F._pair(kernel_size)
        fan_in = c_out * kh * kw
        self.weight = Parameter(_uniform(rng, (c_in, c_out, kh, kw), fan_in))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, n_in, n_out, bias=True, *, rng):
        self.weight = Parameter(_uniform(rng, (n_out, n_in), n_in))
        self.bias = Parameter(_uniform(rng, (n_out,), n_in)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ChannelLayerNorm(Module):
    """LayerNorm over the channel axis of ``(B, C, ...)`` at every position."""

    def __init__(self, channels, eps=1e-6):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return F.layer_norm(x, axes=(1,), gamma=self.gamma.reshape(shape), beta=self.beta.reshape(shape), eps=self.eps)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.groups, self.eps = groups, eps

    def forward(self, x):
        return F.group_norm(x, self.groups, self.gamma, self.beta, self.eps)
