"""Differentiable operations on :class:`Tensor`.

Every op computes its forward result with numpy and registers a closure
mapping the output gradient to one gradient per input.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, as_tensor, make_output


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    if isinstance(b, Tensor):
        return _const(a, b), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_output("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("div", out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return make_output("neg", -x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def bw(g):
        if exponent == 0.0:
            return (np.zeros_like(x.data),)
        return (g * exponent * x.data ** (exponent - 1.0),)

    return make_output("power", x.data ** exponent, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_output("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_output("log", out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_output("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_output("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output("relu", x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_output("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return make_output("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch extents differ between {a.shape} and {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold batch axes into rows
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_output("matmul", out, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_output("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_output("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if out.ndim and 0 in out.shape:
        raise ValueError(f"slice {index!r} of {x.shape} is empty")
    basic = _is_basic_index(index)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_output("getitem", np.ascontiguousarray(out), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ValueError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_output("concat", out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions ----------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_output("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape),)

    return make_output("mean", np.asarray(out), (x,), bw)


# -- normalizers ---------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain``/``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last extent of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(x.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return make_output("layer_norm", out, (x, gain, bias), bw)


# -- spatial -------------------------------------------------------------

def patchify(x: Tensor, patch: int) -> Tensor:
    """Cut an N×H₀×W₀×C image batch into non-overlapping P×P patches.

    Returns N×(H₀/P)×(W₀/P)×(P·P·C); each patch is flattened row-major
    over (row-in-patch, col-in-patch, channel).
    """
    if x.ndim != 4:
        raise ValueError(f"patchify expects N×H×W×C, got {x.shape}")
    n, h0, w0, c = x.shape
    if patch < 1 or h0 % patch or w0 % patch:
        raise ValueError(f"image extent {h0}×{w0} not divisible by patch size {patch}")
    h, w = h0 // patch, w0 // patch
    y = reshape(x, (n, h, patch, w, patch, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (n, h, w, patch * patch * c))


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling on N×H×W×C; ties route gradient to the first max."""
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects N×H×W×C, got {x.shape}")
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"max_pool2d: extent {h}×{w} not divisible by {k}")
    blocks = x.data.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // k, w // k, c, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    return make_output("max_pool2d", np.ascontiguousarray(out), (x,), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution, NHWC input, weight kh×kw×C_in×C_out."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects N×H×W×C input and 4-d weight, got {x.shape}, {weight.shape}")
    kh, kw, cin, cout = weight.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ValueError(f"conv2d: input channels {c} != weight channels {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel extents must be odd")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n,h,w,c,kh,kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * c)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, h, w, kh, kw, c)
            gpad = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
            gx = gpad[:, ph : ph + h, pw : pw + w, :]
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return make_output("conv2d", out, inputs, bw)
