"""Parameters, a small module system, and the basic layers."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, matmul


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator: PCG64 (128-bit LCG state, XSL-RR output), seeded from a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Parameter(Tensor):
    """A trainable leaf tensor that remembers how it was initialized."""

    __slots__ = ("init_spec",)

    def __init__(self, data, name: Optional[str] = None, init_spec: Optional[dict] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.init_spec = init_spec or {"rule": "explicit"}


def init_parameter(rng: np.random.Generator, shape, rule: str, **kw) -> Parameter:
    shape = tuple(shape)
    if rule == "trunc_normal":
        std = kw.get("std", 0.02)
        data = trunc_normal(rng, shape, std)
        spec = {"rule": rule, "std": std}
    elif rule == "kaiming":
        fan_in = int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        data = rng.standard_normal(shape) * std
        spec = {"rule": rule, "fan_in": fan_in}
    elif rule == "zeros":
        data, spec = np.zeros(shape), {"rule": rule}
    elif rule == "ones":
        data, spec = np.ones(shape), {"rule": rule}
    else:
        raise ValueError(f"unknown init rule {rule!r}")
    return Parameter(data, init_spec=spec)


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def name_parameters(self) -> None:
        """Stamp every parameter with its dotted path."""
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {target.shape} vs {value.shape}")
            target[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = init_parameter(rng, (d_in, d_out), "trunc_normal")
        self.bias = init_parameter(rng, (d_out,), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        bias: bool = True,
        init: str = "kaiming",
    ):
        self.weight = init_parameter(rng, (c_out, c_in, kernel, kernel), init)
        self.bias = init_parameter(rng, (c_out,), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = F.LAYER_NORM_EPS):
        self.weight = Parameter(np.ones(dim), init_spec={"rule": "ones"})
        self.bias = Parameter(np.zeros(dim), init_spec={"rule": "zeros"})
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = F.BATCH_NORM_MOMENTUM, eps: float = F.BATCH_NORM_EPS):
        self.weight = Parameter(np.ones(channels), init_spec={"rule": "ones"})
        self.bias = Parameter(np.zeros(channels), init_spec={"rule": "zeros"})
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm_2d(
            x,
            self.weight,
            self.bias,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
        )


class CBR(Module):
    """3x3 convolution, batch normalization, ReLU."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.conv = Conv2d(rng, c_in, c_out, 3, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))
