"""Minimal module system: parameter registry, train/eval flag, standard layers."""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator

import numpy as np

from .autograd import Parameter, Tensor, ops


_CALL_HOOKS: list[Callable] = []


@contextlib.contextmanager
def call_hook(fn: Callable) -> Iterator[None]:
    """Invoke ``fn(module, args, output)`` after every module call inside the block."""
    _CALL_HOOKS.append(fn)
    try:
        yield
    finally:
        _CALL_HOOKS.remove(fn)


class Module:
    """Attribute-registered container of Parameters, buffers and sub-modules.

    Registration order is attribute assignment order, which makes parameter
    names (dotted paths) and enumeration order stable.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def children(self) -> list["Module"]:
        return list(self._modules.values())

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        for hook in _CALL_HOOKS:
            hook(self, args, out)
        return out


class Sequential(Module):
    def __init__(self, *layers: Module, prefix: str = "layer"):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, f"{prefix}{i}", layer)

    def forward(self, x):
        for m in self._modules.values():
            x = m(x)
        return x

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Kaiming-uniform with linear gain: U(-sqrt(3/fan_in), sqrt(3/fan_in))."""
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Ordinary bias-free convolution."""

    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.stride, self.padding = c_in, c_out, k, stride, padding
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype))

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.c, self.eps, self.momentum = c, eps, momentum
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return ops.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class SiLU(Module):
    def forward(self, x):
        return ops.silu(x)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(rng, (d_out, d_in), d_in, dtype))
        bound = 1.0 / math.sqrt(d_in)
        self.bias = Parameter(rng.uniform(-bound, bound, d_out).astype(dtype))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        self.rate = rate
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.rate, self.training, self.rng)
