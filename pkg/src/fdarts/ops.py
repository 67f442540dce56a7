"""Candidate cell operations and the squeeze-excitation attention block."""

from __future__ import annotations

import numpy as np

from .autograd import CatalogError, DimensionError, Tensor
from .nn import (
    Conv2d,
    Linear,
    Module,
    Norm,
    avg_pool2d,
    concat_channels,
    global_avgpool,
    max_pool2d,
    relu,
    scale_channels,
    sigmoid,
)

CANDIDATE_OPS = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "zero",
)

SE_REDUCTION = 16


class ReLUConvBN(Module):
    def __init__(self, cin, cout, kernel, stride, padding, rng, affine=True):
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, padding=padding)
        self.norm = Norm(cout, affine=affine)

    def forward(self, x):
        return self.norm(self.conv(relu(x)))


class DilConv(Module):
    def __init__(self, cin, cout, kernel, stride, padding, dilation, rng, affine=True):
        self.depthwise = Conv2d(cin, cin, kernel, rng, stride=stride, padding=padding, dilation=dilation, groups=cin)
        self.pointwise = Conv2d(cin, cout, 1, rng)
        self.norm = Norm(cout, affine=affine)

    def forward(self, x):
        return self.norm(self.pointwise(self.depthwise(relu(x))))


class SepConv(Module):
    """Two stacked depthwise-pointwise blocks; only the first one is strided."""

    def __init__(self, cin, cout, kernel, stride, padding, rng, affine=True):
        self.first = DilConv(cin, cin, kernel, stride, padding, 1, rng, affine)
        self.second = DilConv(cin, cout, kernel, 1, padding, 1, rng, affine)

    def forward(self, x):
        return self.second(self.first(x))


class FactorizedReduce(Module):
    """Halve the resolution with two offset strided 1x1 convolutions."""

    def __init__(self, cin, cout, rng, affine=True):
        if cout % 2:
            raise DimensionError(f"FactorizedReduce: output channels {cout} must be even")
        self.conv_a = Conv2d(cin, cout // 2, 1, rng, stride=2)
        self.conv_b = Conv2d(cin, cout // 2, 1, rng, stride=2)
        self.norm = Norm(cout, affine=affine)

    def forward(self, x):
        x = relu(x)
        a = self.conv_a(x)
        b = self.conv_b(x[:, :, 1:, 1:])
        if a.shape != b.shape:
            raise DimensionError(f"FactorizedReduce: odd spatial size {x.shape[2:]} cannot be halved")
        return self.norm(concat_channels([a, b]))


class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    """Outputs zeros of the (possibly strided) input shape; contributes no gradient."""

    def __init__(self, stride):
        self.stride = stride

    def forward(self, x):
        b, c, h, w = x.shape
        h, w = -(-h // self.stride), -(-w // self.stride)
        return Tensor(np.zeros((b, c, h, w), dtype=x.data.dtype))


class Pool(Module):
    def __init__(self, kind, stride):
        self.kind, self.stride = kind, stride

    def forward(self, x):
        if self.kind == "max":
            return max_pool2d(x, 3, self.stride, 1)
        return avg_pool2d(x, 3, self.stride, 1, count_include_pad=False)


class CandidateOp(Module):
    """A named operation instance with its fixed channel count and stride."""

    def __init__(self, name, channels, stride, body):
        self.name, self.channels, self.stride = name, channels, stride
        self.body = body

    def forward(self, x):
        return self.body(x)

    @property
    def is_zero(self):
        return self.name == "zero"

    def __repr__(self):
        return f"CandidateOp({self.name}, C={self.channels}, stride={self.stride})"


def make_candidate_op(name: str, channels: int, stride: int, rng: np.random.Generator | None = None,
                      affine: bool = True) -> CandidateOp:
    if name not in CANDIDATE_OPS:
        raise CatalogError(f"unknown operation {name!r}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    rng = rng if rng is not None else np.random.default_rng(0)
    c = channels
    if name == "sep_conv_3x3":
        body = SepConv(c, c, 3, stride, 1, rng, affine)
    elif name == "sep_conv_5x5":
        body = SepConv(c, c, 5, stride, 2, rng, affine)
    elif name == "dil_conv_3x3":
        body = DilConv(c, c, 3, stride, 2, 2, rng, affine)
    elif name == "dil_conv_5x5":
        body = DilConv(c, c, 5, stride, 4, 2, rng, affine)
    elif name == "max_pool_3x3":
        body = Pool("max", stride)
    elif name == "avg_pool_3x3":
        body = Pool("avg", stride)
    elif name == "skip_connect":
        body = Identity() if stride == 1 else FactorizedReduce(c, c, rng, affine)
    else:
        body = Zero(stride)
    return CandidateOp(name, channels, stride, body)


def op_param_count(name: str, channels: int, stride: int, affine: bool = True) -> int:
    """Closed-form learnable parameter count of ``make_candidate_op(name, channels, stride)``."""
    c = channels
    norm = 2 * c if affine else 0
    if name in ("sep_conv_3x3", "sep_conv_5x5"):
        k = int(name[-1])
        return 2 * (c * k * k + c * c + norm)
    if name in ("dil_conv_3x3", "dil_conv_5x5"):
        k = int(name[-1])
        return c * k * k + c * c + norm
    if name == "skip_connect" and stride == 2:
        return 2 * c * (c // 2) + norm
    if name in CANDIDATE_OPS:
        return 0
    raise CatalogError(f"unknown operation {name!r}")


class AttentionBlock(Module):
    """Squeeze-excitation channel gate: pool -> fc -> relu -> fc -> sigmoid -> scale."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, reduction: int = SE_REDUCTION):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.reduction = reduction
        self.hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, self.hidden, rng, zero_bias=True)
        self.fc2 = Linear(self.hidden, channels, rng, zero_bias=True)

    def forward(self, x):
        return se_forward(x, self)


def se_squeeze(x):
    return global_avgpool(x)


def se_excite(s, block: AttentionBlock):
    return sigmoid(block.fc2(relu(block.fc1(s))))


def se_scale(x, gate):
    return scale_channels(x, gate)


def se_forward(x: Tensor, block: AttentionBlock) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"se_forward: expected (B, C, H, W), got {x.shape}")
    if x.shape[1] != block.channels:
        raise DimensionError(f"se_forward: input channels (axis 1) {x.shape[1]} != block channels {block.channels}")
    return se_scale(x, se_excite(se_squeeze(x), block))


def se_param_count(channels: int, reduction: int = SE_REDUCTION) -> int:
    h = max(1, channels // reduction)
    return channels * h + h + h * channels + channels
