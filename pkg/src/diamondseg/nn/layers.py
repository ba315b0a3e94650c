"""Layer objects that hold parameters and cache activations between forward and backward."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape


class Module:
    """Base class; subclasses register children/parameters/buffers as attributes."""

    def __init__(self):
        self._children: dict[str, Module] = {}
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def __setattr__(self, name, value):
        if isinstance(value, Module) and name != "_children":
            self.__dict__.setdefault("_children", {})[name] = value
        elif isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.value for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for name, p in own.items():
            if state[name].shape != p.value.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.value.shape}")
            p.value[...] = state[name]
        for name, b in bufs.items():
            b[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad.fill(0)

    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for m in self.modules():
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, dilation=1, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.dilation = stride, dilation
        self.weight = Parameter(he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self._cache = None

    def forward(self, x, train=False):
        b = self.bias.value if self.bias is not None else None
        y, self._cache = F.conv2d_forward(x, self.weight.value, b, self.stride, self.dilation)
        return y

    def backward(self, dy):
        dx, dw, db = F.conv2d_backward(dy, self._cache)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class DepthwiseConv2d(Module):
    def __init__(self, channels, k=3, stride=1, dilation=1, bias=False, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.dilation = stride, dilation
        self.weight = Parameter(he_normal(rng, (channels, 1, k, k), k * k, dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype)) if bias else None
        self._cache = None

    def forward(self, x, train=False):
        b = self.bias.value if self.bias is not None else None
        y, self._cache = F.depthwise_conv2d_forward(x, self.weight.value, b, self.stride, self.dilation)
        return y

    def backward(self, dy):
        dx, dw, db = F.depthwise_conv2d_backward(dy, self._cache)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self._cache = None

    def forward(self, x, train=False):
        y, self._cache = F.batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var,
            train, self.momentum, self.eps,
        )
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = F.batchnorm_backward(dy, self._cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class ReLU(Module):
    def forward(self, x, train=False):
        y, self._mask = F.relu_forward(x)
        return y

    def backward(self, dy):
        return F.relu_backward(dy, self._mask)


class Upsample(Module):
    def __init__(self, factor: int):
        super().__init__()
        if factor not in F.UPSAMPLE_FACTORS:
            raise F.InvalidFactor(f"factor {factor} not in {F.UPSAMPLE_FACTORS}")
        self.factor = factor

    def forward(self, x, train=False):
        y, self._cache = F.bilinear_upsample(x, self.factor)
        return y

    def backward(self, dy):
        return F.bilinear_upsample_backward(dy, self._cache)


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        y, self._shape = F.global_avg_pool_forward(x)
        return y

    def backward(self, dy):
        return F.global_avg_pool_backward(dy, self._shape)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            setattr(self, str(i), layer)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def conv_bn_relu(c_in, c_out, k=3, stride=1, dilation=1, rng=None, dtype=np.float32) -> Sequential:
    return Sequential(
        Conv2d(c_in, c_out, k, stride, dilation, bias=False, rng=rng, dtype=dtype),
        BatchNorm2d(c_out, dtype=dtype),
        ReLU(),
    )


def separable_block(c_in, c_out, k=3, stride=1, dilation=1, rng=None, dtype=np.float32) -> Sequential:
    """Depthwise conv -> BN -> ReLU -> pointwise 1x1 -> BN -> ReLU."""
    return Sequential(
        DepthwiseConv2d(c_in, k, stride, dilation, rng=rng, dtype=dtype),
        BatchNorm2d(c_in, dtype=dtype),
        ReLU(),
        Conv2d(c_in, c_out, 1, bias=False, rng=rng, dtype=dtype),
        BatchNorm2d(c_out, dtype=dtype),
        ReLU(),
    )
