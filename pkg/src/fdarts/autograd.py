"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations executed inside a :class:`GradientTape` context are recorded in
execution order; :meth:`GradientTape.gradient` replays that list backwards,
which is a valid reverse topological order by construction.

>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with GradientTape() as tape:
...     loss = (x * x).sum()
>>> tape.gradient(loss, [x])[0]
array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "CatalogError",
    "DeterminismError",
    "DimensionError",
    "GradientTape",
    "NumericFault",
    "PRIMITIVES",
    "TapeError",
    "Tensor",
    "apply_primitive",
    "backward",
    "default_dtype",
    "grad_check",
    "inject_fault",
    "set_default_dtype",
]


class DimensionError(ValueError):
    """Input shapes violate a primitive's shape rule."""


class CatalogError(KeyError):
    """Unknown primitive or operation name."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, replay, frozen tape)."""


class DeterminismError(RuntimeError):
    """A function under gradient check gave different outputs for the same input."""


class NumericFault(FloatingPointError):
    """NaN or infinity encountered in an optimizer input."""


_DTYPE = np.float64


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Switch between 64-bit (verification) and 32-bit (fast) mode."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


class Tensor:
    """n-dimensional array that may participate in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return apply_primitive("add", [self, _lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("add", [self, apply_primitive("scalar_mul", [_lift(other)], {"c": -1.0})])

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        return apply_primitive("scalar_mul", [self], {"c": -1.0})

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_mul", [self], {"c": float(other)})
        return apply_primitive("mul", [self, _lift(other)])

    __rmul__ = __mul__

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _lift(other)])

    def __getitem__(self, index):
        return apply_primitive("getitem", [self], {"index": index})

    def sum(self):
        return apply_primitive("sum", [self])

    def mean(self):
        return apply_primitive("scalar_mul", [self.sum()], {"c": 1.0 / self.size})

    def relu(self):
        return apply_primitive("relu", [self])

    def sigmoid(self):
        return apply_primitive("sigmoid", [self])

    def flatten(self):
        return apply_primitive("flatten", [self])


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    primitive: str
    inputs: list[Tensor]
    output: Tensor
    vjp: Callable | None


@dataclass(eq=False)
class GradientTape:
    """Records primitives applied while the context is active.

    A tape can be replayed once; call :meth:`reset` to reuse it.
    """

    nodes: list[_Node] = field(default_factory=list)
    frozen: bool = False

    def __enter__(self):
        if self.frozen:
            raise TapeError("tape already replayed; reset() before recording again")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, primitive, inputs, output, vjp):
        output.tape_id = len(self.nodes)
        self.nodes.append(_Node(primitive, list(inputs), output, vjp))

    def reset(self) -> None:
        """Drop all recorded nodes and their saved activations."""
        for node in self.nodes:
            node.output.tape_id = None
        self.nodes.clear()
        self.frozen = False

    def gradient(self, loss: Tensor, sources: Sequence[Tensor] | None = None, accumulate: bool = False):
        """Reverse pass from a scalar ``loss``.

        Returns a list of gradient arrays aligned with ``sources`` (zeros for
        sources the loss does not depend on). Without ``sources`` every leaf
        that requires grad gets its ``.grad`` populated and a map from leaf id
        to gradient is returned. ``accumulate`` adds into existing ``.grad``.
        """
        if self.frozen:
            raise TapeError("tape already replayed; reset() before calling gradient again")
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        self.frozen = True
        stack = _tape_stack()
        if self in stack:
            stack.remove(self)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.tape_id is None:
                    leaves[key] = t
        if loss.tape_id is None and loss.requires_grad:
            leaves[id(loss)] = loss
        # release saved activations
        for node in self.nodes:
            node.vjp = None
            node.output.tape_id = None
        self.nodes.clear()

        if sources is not None:
            return [grads[id(s)] if id(s) in grads else np.zeros_like(s.data) for s in sources]
        out = {}
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g if (leaf.grad is None or not accumulate) else leaf.grad + g
            out[key] = g
        return out


_local = threading.local()


def _tape_stack() -> list[GradientTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth primitive evaluated inside the block."""
    prev = getattr(_local, "kinks", None)
    _local.kinks = pattern = []
    try:
        yield pattern
    finally:
        _local.kinks = prev


def _note_kink(branch: np.ndarray) -> None:
    pattern = getattr(_local, "kinks", None)
    if pattern is not None:
        pattern.append(branch.copy())


def backward(loss: Tensor, tape: GradientTape) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf that requires grad."""
    return tape.gradient(loss)


# ---------------------------------------------------------------------------
# primitive catalog

PRIMITIVES: dict[str, Callable] = {}
_FAULTS: set[str] = set()


def _primitive(name):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn

    return deco


@contextlib.contextmanager
def inject_fault(name: str):
    """Test hook: flip the sign of a primitive's backward pass."""
    if name not in PRIMITIVES:
        raise CatalogError(name)
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


def apply_primitive(op: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise CatalogError(f"unknown primitive {op!r}; catalog: {sorted(PRIMITIVES)}") from None
    inputs = [_lift(t) for t in inputs]
    out_data, vjp = fn(*[t.data for t in inputs], **(attrs or {}))
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    stack = _tape_stack()
    if needs and stack:
        if op in _FAULTS:
            inner = vjp
            vjp = lambda g: tuple(None if x is None else -x for x in inner(g))  # noqa: E731
        stack[-1].record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _dims(name, expected, arr):
    if arr.ndim != expected:
        raise DimensionError(f"{name}: expected {expected}-d input, got shape {arr.shape}")


@_primitive("add")
def _add(a, b):
    try:
        out = a + b
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@_primitive("mul")
def _mul(a, b):
    try:
        out = a * b
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_primitive("scalar_mul")
def _scalar_mul(a, c):
    return a * c, lambda g: (g * c,)


@_primitive("sum")
def _sum(a):
    return np.asarray(a.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),)


@_primitive("matmul")
def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axes differ, {a.shape} @ {b.shape}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


@_primitive("linear")
def _linear(x, w, b=None):
    # w: (out, in)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input features axis 1 of {x.shape} vs weight axis 1 of {w.shape}")
    out = x @ w.T
    if b is not None:
        out = out + b

    def vjp(g):
        gb = g.sum(axis=0) if b is not None else None
        return (g @ w, g.T @ x, gb)

    return out, vjp


@_primitive("relu")
def _relu(x):
    mask = x > 0
    _note_kink(mask)
    return x * mask, lambda g: (g * mask,)


@_primitive("sigmoid")
def _sigmoid(x):
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    s[~pos] = e / (1.0 + e)
    return s, lambda g: (g * s * (1.0 - s),)


@_primitive("softmax")
def _softmax(x, axis=-1, mask=None):
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise DimensionError("softmax: a slice has no valid entries")
        z = np.where(mask, x, -np.inf)
    else:
        z = x
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return s, vjp


@_primitive("getitem")
def _getitem(x, index):
    out = x[index]

    def vjp(g):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)

    return np.array(out), vjp


@_primitive("flatten")
def _flatten(x):
    return x.reshape(x.shape[0], -1), lambda g: (g.reshape(x.shape),)


@_primitive("concat_channels")
def _concat(*xs):
    for x in xs:
        _dims("concat_channels", 4, x)
        if x.shape[0] != xs[0].shape[0] or x.shape[2:] != xs[0].shape[2:]:
            raise DimensionError(
                f"concat_channels: batch/spatial axes differ, {xs[0].shape} vs {x.shape}"
            )
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    return np.concatenate(xs, axis=1), lambda g: tuple(np.split(g, splits, axis=1))


@_primitive("scale_channels")
def _scale_channels(x, s):
    _dims("scale_channels", 4, x)
    if s.shape != x.shape[:2]:
        raise DimensionError(f"scale_channels: gate shape {s.shape} vs feature axes 0-1 of {x.shape}")
    s4 = s[:, :, None, None]

    def vjp(g):
        return (g * s4, (g * x).sum(axis=(2, 3)))

    return x * s4, vjp


@_primitive("global_avgpool")
def _gap(x):
    _dims("global_avgpool", 4, x)
    hw = x.shape[2] * x.shape[3]

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return x.mean(axis=(2, 3)), vjp


@_primitive("dropout_mask_apply")
def _dropout_mask_apply(x, mask):
    # mask is a constant supplied by the caller (already carries 1/(1-p) scaling)
    return x * mask, lambda g: (_unbroadcast(g * mask, x.shape), None)


@_primitive("cross_entropy")
def _cross_entropy(logits, labels):
    _dims("cross_entropy", 2, logits)
    labels = labels.astype(np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} vs batch axis of {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / n, None)

    return np.asarray(loss), vjp


@_primitive("affine_channel_norm")
def _affine_channel_norm(x, gamma=None, beta=None, running=None, training=True, momentum=0.1, eps=1e-5):
    """Per-channel normalisation; ``running`` is a (mean, var) pair updated in place."""
    _dims("affine_channel_norm", 4, x)
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if running is not None:
            rm, rv = running
            rm *= 1.0 - momentum
            rm += momentum * mu.reshape(c)
            rv *= 1.0 - momentum
            rv += momentum * var.reshape(c) * (m / max(m - 1, 1))
    else:
        m = None
        rm, rv = running
        mu = rm.reshape(shape)
        var = rv.reshape(shape)
        xc = x - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.reshape(shape) if gamma is not None else None
    out = xhat * g4 if g4 is not None else xhat
    if beta is not None:
        out = out + beta.reshape(shape)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma is not None else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta is not None else None
        gx_hat = g * g4 if g4 is not None else g
        if training:
            axes = (0, 2, 3)
            gx = inv * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gx_hat * inv
        return (gx, ggamma, gbeta)

    return out, vjp


def _pad4(x, pad, value=0.0):
    if pad == 0:
        return x
    a, b, h, w = x.shape
    out = np.full((a, b, h + 2 * pad, w + 2 * pad), value, dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _out_size(n, k, stride, pad, dilation, name):
    span = dilation * (k - 1) + 1
    size = (n + 2 * pad - span) // stride + 1
    if size <= 0:
        raise DimensionError(f"{name}: spatial axis {n} too small for kernel span {span} with padding {pad}")
    return size


def _window(xp, i, j, dilation, stride, ho, wo):
    r0, c0 = i * dilation, j * dilation
    return xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]


@_primitive("conv2d")
def _conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    _dims("conv2d", 4, x)
    _dims("conv2d", 4, w)
    bsz, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise DimensionError(
            f"conv2d: input channels (axis 1) {cin} incompatible with weight axis 1 {cin_g} and groups {groups}"
        )
    ho = _out_size(h, kh, stride, padding, dilation, "conv2d")
    wo = _out_size(wd, kw, stride, padding, dilation, "conv2d")
    if groups == 1 and kh == kw == 1 and padding == 0:
        out, vjp = _pointwise(x, w, stride, ho, wo)
    elif groups == cin and cin_g == 1 and cout == cin:
        out, vjp = _depthwise(x, w, stride, padding, dilation, ho, wo)
    else:
        out, vjp = _grouped(x, w, stride, padding, dilation, groups, ho, wo)
    if b is None:
        return out, lambda g: vjp(g) + (None,)
    out = out + b[None, :, None, None]
    return out, lambda g: vjp(g) + (g.sum(axis=(0, 2, 3)),)


def _pointwise(x, w, stride, ho, wo):
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    xs = x[:, :, ::stride, ::stride] if stride > 1 else x
    xf = np.ascontiguousarray(xs).reshape(bsz, cin, ho * wo)
    w2 = w.reshape(cout, cin)
    out = np.matmul(w2, xf).reshape(bsz, cout, ho, wo)

    def vjp(g):
        gf = g.reshape(bsz, cout, ho * wo)
        gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(w.shape)
        gxs = np.matmul(w2.T, gf).reshape(bsz, cin, ho, wo)
        if stride > 1:
            gx = np.zeros_like(x)
            gx[:, :, ::stride, ::stride] = gxs
        else:
            gx = gxs
        return (gx, gw)

    return out, vjp


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    """(B, C, Ho, Wo, kh, kw) view of the padded input."""
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]


def _col2im(gcols, shape, kh, kw, stride, dilation, ho, wo):
    gxp = np.zeros(shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            _window(gxp, i, j, dilation, stride, ho, wo)[...] += gcols[:, :, :, :, i, j]
    return gxp


def _dw_apply(xpt, wk, kh, kw, dilation, stride, ho, wo):
    """Depthwise correlation in channel-major layout: xpt (C, B, Hp, Wp), wk (C, 1, K)."""
    c, bsz = xpt.shape[:2]
    cols = np.empty((c, kh * kw, bsz, ho, wo), dtype=xpt.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i * kw + j] = _window(xpt, i, j, dilation, stride, ho, wo)
    cols = cols.reshape(c, kh * kw, bsz * ho * wo)
    return np.matmul(wk, cols).reshape(c, bsz, ho, wo), cols


def _depthwise(x, w, stride, padding, dilation, ho, wo):
    bsz, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    xpt = _pad4(x.transpose(1, 0, 2, 3), padding)
    wk = w.reshape(c, 1, kh * kw)
    out_t, cols = _dw_apply(xpt, wk, kh, kw, dilation, stride, ho, wo)
    out = out_t.transpose(1, 0, 2, 3)

    def vjp(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gw = np.matmul(gt.reshape(c, 1, -1), cols.transpose(0, 2, 1)).reshape(w.shape)
        back_pad = dilation * (kh - 1) - padding
        if stride == 1 and kh == kw and back_pad >= 0:
            # input gradient of a stride-1 correlation is a correlation with the flipped kernel
            flipped = wk[:, :, ::-1].copy()
            gxt, _ = _dw_apply(_pad4(gt, back_pad), flipped, kh, kw, dilation, 1, h, wd)
            return (gxt.transpose(1, 0, 2, 3), gw)
        gxpt = np.zeros_like(xpt)
        for i in range(kh):
            for j in range(kw):
                _window(gxpt, i, j, dilation, stride, ho, wo)[...] += gt * wk[:, :, i * kw + j, None, None]
        gxt = gxpt[:, :, padding:padding + h, padding:padding + wd] if padding else gxpt
        return (gxt.transpose(1, 0, 2, 3), gw)

    return out, vjp


def _grouped(x, w, stride, padding, dilation, groups, ho, wo):
    bsz, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    cout_g = cout // groups
    xp = _pad4(x, padding)
    cols = np.ascontiguousarray(_im2col(xp, kh, kw, stride, dilation, ho, wo))
    # (B, G, Cg, P, K)
    cols_g = cols.reshape(bsz, groups, cin_g, ho * wo, kh * kw)
    wg = w.reshape(groups, cout_g, cin_g, kh * kw)
    out = np.einsum("bgcpk,gock->bgop", cols_g, wg, optimize=True).reshape(bsz, cout, ho, wo)

    def vjp(g):
        gg = g.reshape(bsz, groups, cout_g, ho * wo)
        gw = np.einsum("bgop,bgcpk->gock", gg, cols_g, optimize=True).reshape(w.shape)
        gcols = np.einsum("bgop,gock->bgcpk", gg, wg, optimize=True).reshape(bsz, cin, ho, wo, kh, kw)
        gxp = _col2im(gcols, xp.shape, kh, kw, stride, dilation, ho, wo)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx, gw)

    return out, vjp


@_primitive("maxpool2d")
def _maxpool2d(x, kernel=3, stride=1, padding=0):
    _dims("maxpool2d", 4, x)
    bsz, c, h, wd = x.shape
    ho = _out_size(h, kernel, stride, padding, 1, "maxpool2d")
    wo = _out_size(wd, kernel, stride, padding, 1, "maxpool2d")
    xp = _pad4(x, padding, -np.inf)
    out = np.full((bsz, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((bsz, c, ho, wo), dtype=np.int16)
    k = 0
    for i in range(kernel):
        for j in range(kernel):
            win = _window(xp, i, j, 1, stride, ho, wo)
            better = win > out
            out = np.where(better, win, out)
            arg[better] = k
            k += 1
    _note_kink(arg)

    def vjp(g):
        gxp = np.zeros_like(xp)
        k = 0
        for i in range(kernel):
            for j in range(kernel):
                _window(gxp, i, j, 1, stride, ho, wo)[...] += g * (arg == k)
                k += 1
        return (gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp,)

    return out, vjp


@_primitive("avgpool2d")
def _avgpool2d(x, kernel=3, stride=1, padding=0, count_include_pad=False):
    _dims("avgpool2d", 4, x)
    bsz, c, h, wd = x.shape
    ho = _out_size(h, kernel, stride, padding, 1, "avgpool2d")
    wo = _out_size(wd, kernel, stride, padding, 1, "avgpool2d")
    xp = _pad4(x, padding)
    total = np.zeros((bsz, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            total += _window(xp, i, j, 1, stride, ho, wo)
    if count_include_pad or padding == 0:
        count = np.full((1, 1, ho, wo), float(kernel * kernel), dtype=x.dtype)
    else:
        ones = _pad4(np.ones((1, 1, h, wd), dtype=x.dtype), padding)
        count = np.zeros((1, 1, ho, wo), dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                count += _window(ones, i, j, 1, stride, ho, wo)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gs = g / count
        for i in range(kernel):
            for j in range(kernel):
                _window(gxp, i, j, 1, stride, ho, wo)[...] += gs
        return (gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp,)

    return total / count, vjp


@_primitive("weighted_sum")
def _weighted_sum(weights, *xs):
    """sum_k weights[k] * xs[k] for a 1-d weight vector."""
    if weights.ndim != 1 or weights.shape[0] != len(xs):
        raise DimensionError(f"weighted_sum: weights shape {weights.shape} vs {len(xs)} inputs")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise DimensionError(f"weighted_sum: input shapes differ, {xs[0].shape} vs {x.shape}")
    out = sum(weights[k] * x for k, x in enumerate(xs))

    def vjp(g):
        gw = np.array([(g * x).sum() for x in xs], dtype=weights.dtype)
        return (gw, *[g * weights[k] for k in range(len(xs))])

    return out, vjp


# ---------------------------------------------------------------------------
# finite-difference checker


def grad_check(f: Callable, x, eps: float = 1e-3, max_elements: int | None = None, seed: int = 0,
               skip_kinks: bool = False, stats: dict | None = None) -> float:
    """Worst relative discrepancy between tape gradients and central differences.

    ``x`` is a Tensor or list of Tensors; ``f`` maps them to a Tensor. A
    non-scalar output is contracted with a fixed random cotangent. With
    ``max_elements`` only that many randomly chosen entries per input are
    perturbed. Each error is ``|analytic - numeric| / max(1, |analytic|)``.

    With ``skip_kinks`` an entry whose +eps or -eps evaluation switches the
    branch of any relu or max-pool is set aside and another entry is drawn in
    its place; the difference quotient there straddles a point where the
    function has no derivative. ``stats`` receives how many entries were
    checked and set aside, and the worst error counting the set-aside ones.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    rng = np.random.default_rng(seed)
    for t in xs:
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)

    def call():
        return f(xs[0]) if isinstance(x, Tensor) else f(*xs)

    def same(a, b):
        return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))

    first = call()
    cot = rng.standard_normal(first.shape) if first.data.size != 1 else None

    def scalar(out: Tensor) -> Tensor:
        return out if cot is None else (out * Tensor(cot)).sum()

    checked = skipped = 0
    worst_all = 0.0
    try:
        second = call()
        if not np.array_equal(first.data, second.data):
            raise DeterminismError("function gave different outputs on identical inputs")
        with record_kinks() as base, GradientTape() as tape:
            loss = scalar(call())
        analytic = tape.gradient(loss, xs)

        worst = 0.0
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            want = flat.size if max_elements is None else min(max_elements, flat.size)
            order = np.arange(flat.size) if max_elements is None else rng.permutation(flat.size)
            gflat = ga.reshape(-1)
            done = 0
            for k in order:
                if done == want:
                    break
                orig = flat[k]
                with record_kinks() as plus:
                    flat[k] = orig + eps
                    fp = scalar(call()).item()
                with record_kinks() as minus:
                    flat[k] = orig - eps
                    fm = scalar(call()).item()
                flat[k] = orig
                numeric = (fp - fm) / (2 * eps)
                err = abs(gflat[k] - numeric) / max(1.0, abs(gflat[k]))
                worst_all = max(worst_all, err)
                if skip_kinks and not (same(plus, base) and same(minus, base)):
                    skipped += 1
                    continue
                worst = max(worst, err)
                done += 1
            checked += done
        if stats is not None:
            stats.update(checked=checked, set_aside=skipped, worst_including_set_aside=worst_all)
        return worst
    finally:
        for t, flag in zip(xs, flags):
            t.requires_grad = flag
