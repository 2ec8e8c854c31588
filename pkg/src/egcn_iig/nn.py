"""Module containers and the basic parameterized layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Value


class Parameter(Value):
    """A trainable leaf. ``decay`` marks weights that receive L2 weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.decay = decay


class Module:
    """Minimal parameter container with train/eval mode."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            else:
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffer_names:
            yield f"{prefix}{key}", getattr(self, key)
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.named_modules():
            for key in m._buffer_names:
                setattr(m, key, getattr(m, key).astype(dtype))
        return self


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=(1, 1), stride=(1, 1), groups=1, rng=None):
        rng = rng or np.random.default_rng(0)
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.groups = groups
        self.padding = ((self.kernel[0] - 1) // 2, (self.kernel[1] - 1) // 2)
        fan_in = (c_in // groups) * self.kernel[0] * self.kernel[1]
        self.weight = Parameter(_uniform(rng, (c_out, c_in // groups) + self.kernel, fan_in))

    def forward(self, x: Value) -> Value:
        return T.conv2d(x, self.weight, self.stride, self.padding, self.groups)


class BatchNorm(Module):
    """Per-channel batch normalization; momentum 0.9, eps 1e-5."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels), decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Value, residual: Value | None = None, activation: str | None = None) -> Value:
        """Normalize ``x``; optionally add ``residual`` and apply ``activation`` in the same node."""
        return T.norm_act(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, residual, activation, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (c_out, c_in), c_in))
        self.bias = Parameter(_uniform(rng, (c_out,), c_in), decay=False) if bias else None

    def forward(self, x: Value) -> Value:
        return T.linear(x, self.weight, self.bias)
