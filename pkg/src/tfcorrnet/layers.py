"""Parameter containers shared by the network blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters (leaf tensors) and submodules as attributes.

    Parameter names are dotted attribute paths in insertion order, which
    keeps checkpoints and optimizer state deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = param(w.astype(dtype))
        self.bias = param(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, shape, dtype=np.float32):
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        self.gamma = param(np.ones(shape, dtype=dtype))
        self.beta = param(np.zeros(shape, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, n_axes=self.gamma.ndim)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel=(3, 3), dtype=np.float32):
        fan_in = c_in * kernel[0] * kernel[1]
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = param(rng.uniform(-bound, bound, (c_out, c_in) + tuple(kernel)).astype(dtype))
        self.bias = param(np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        if kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        bound = 1.0 / np.sqrt(kernel)
        self.weight = param(rng.uniform(-bound, bound, (channels, kernel)).astype(dtype))
        self.bias = param(np.zeros((channels, 1), dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        """``x`` is (..., C, L)."""
        return T.add(T.conv1d_depthwise(x, self.weight), _expand(self.bias, x.ndim))


def _expand(b: Tensor, ndim: int) -> Tensor:
    return b if b.ndim == ndim else T.reshape(b, (1,) * (ndim - b.ndim) + b.shape)
