"""Thin functional wrappers over the primitive catalog plus a parameter-owning Module base."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autograd import Tensor, apply_primitive, default_dtype


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    inputs = [x, w] if b is None else [x, w, b]
    return apply_primitive(
        "conv2d", inputs, {"stride": stride, "padding": padding, "dilation": dilation, "groups": groups}
    )


def relu(x):
    return apply_primitive("relu", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def softmax(x, axis=-1, mask=None):
    return apply_primitive("softmax", [x], {"axis": axis, "mask": mask})


def linear(x, w, b=None):
    return apply_primitive("linear", [x, w] if b is None else [x, w, b])


def max_pool2d(x, kernel, stride, padding):
    return apply_primitive("maxpool2d", [x], {"kernel": kernel, "stride": stride, "padding": padding})


def avg_pool2d(x, kernel, stride, padding, count_include_pad=False):
    return apply_primitive(
        "avgpool2d",
        [x],
        {"kernel": kernel, "stride": stride, "padding": padding, "count_include_pad": count_include_pad},
    )


def global_avgpool(x):
    return apply_primitive("global_avgpool", [x])


def concat_channels(xs):
    return apply_primitive("concat_channels", list(xs))


def scale_channels(x, s):
    return apply_primitive("scale_channels", [x, s])


def cross_entropy(logits, labels):
    return apply_primitive("cross_entropy", [logits, Tensor(np.asarray(labels, dtype=np.float64))])


def weighted_sum(weights, xs):
    return apply_primitive("weighted_sum", [weights, *xs])


def dropout_mask_apply(x, mask):
    return apply_primitive("dropout_mask_apply", [x, Tensor(mask)])


class Module:
    """Owns parameters (Tensors with requires_grad) and buffers; tracks train/eval mode."""

    training = True

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk_params(f"{prefix}{key}", value)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            yield from _walk_buffers(f"{prefix}{key}", value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            yield from _walk_modules(value)

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk_params(name, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for k, v in enumerate(value):
            yield from _walk_params(f"{name}.{k}", v)


def _walk_buffers(name, value):
    if isinstance(value, Module):
        yield from value.named_buffers(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for k, v in enumerate(value):
            yield from _walk_buffers(f"{name}.{k}", v)


def _walk_modules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _walk_modules(v)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, groups=1, bias=False):
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        fan_in = (cin // groups) * kernel * kernel
        self.weight = uniform_init(rng, (cout, cin // groups, kernel, kernel), fan_in)
        self.bias = uniform_init(rng, (cout,), fan_in) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class Norm(Module):
    """Per-channel normalisation with optional learnable scale/shift and running statistics."""

    def __init__(self, channels, affine=True, momentum=0.1, eps=1e-5):
        dt = default_dtype()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True) if affine else None
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True) if affine else None
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x):
        inputs = [x] if self.gamma is None else [x, self.gamma, self.beta]
        return apply_primitive(
            "affine_channel_norm",
            inputs,
            {
                "running": (self.running_mean, self.running_var),
                "training": self.training,
                "momentum": self.momentum,
                "eps": self.eps,
            },
        )


class Linear(Module):
    def __init__(self, fin, fout, rng, bias=True, zero_bias=False):
        self.weight = uniform_init(rng, (fout, fin), fin)
        if not bias:
            self.bias = None
        elif zero_bias:
            self.bias = Tensor(np.zeros(fout, dtype=default_dtype()), requires_grad=True)
        else:
            self.bias = uniform_init(rng, (fout,), fin)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


def count_parameters(module: Module) -> int:
    return sum(p.size for p in module.parameters())
