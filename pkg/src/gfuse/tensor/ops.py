"""Neural-network operations on :class:`~gfuse.tensor.core.Tensor`.

Convolutions lower to a single GEMM through im2col; the
naive nested-loop versions used to validate them live in the test oracles.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import counters
from .core import Tensor, as_tensor, make_op

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "sigmoid",
    "tanh",
    "softplus",
    "mish",
    "softmax_rows",
    "layer_norm",
    "linear",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if sh != 1 or sw != 1:
        win = win[:, :, ::sh, ::sw]
    return win


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Rows are output pixels (n, i, j); columns are (c, a, b) patch entries."""
    win = _windows(xp, kh, kw, sh, sw)
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _conv_forward(xp: np.ndarray, w: np.ndarray, sh: int, sw: int, keep_cols: bool = False):
    # xp: N,C,Hp,Wp already padded; w: O,C,kh,kw
    o, c, kh, kw = w.shape
    n, _, hp, wp = xp.shape
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    cols = _im2col(xp, kh, kw, sh, sw)
    out = (cols @ w.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return (out, cols) if keep_cols else out


def _input_grad(g2: np.ndarray, w: np.ndarray, shape: tuple[int, ...], sh: int, sw: int, ho: int, wo: int):
    """Gradient w.r.t. the padded input: one small GEMM per kernel tap, scattered in NHWC."""
    n, c, hp, wp = shape
    o, _, kh, kw = w.shape
    gxp = np.zeros((n, hp, wp, c))
    for a in range(kh):
        for b in range(kw):
            tap = (g2 @ w[:, :, a, b]).reshape(n, ho, wo, c)
            gxp[:, a:a + sh * (ho - 1) + 1:sh, b:b + sw * (wo - 1) + 1:sw] += tap
    return gxp.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=(0, 0)) -> Tensor:
    """2-D cross-correlation over an NCHW input with an OIKhKw kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w_ = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or w_ + 2 * pw < kw:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    wd = weight.data
    out, cols = _conv_forward(xp, wd, sh, sw, keep_cols=True)
    ho, wo = out.shape[2:]
    counters.add_macs(n * o * ho * wo * c * kh * kw)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if x.requires_grad:
            gxp = _input_grad(g2, wd, xp.shape, sh, sw, ho, wo)
            gx = gxp[:, :, ph:ph + h, pw:pw + w_]
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out, inputs, vjp)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1) -> Tensor:
    """Transposed convolution; ``weight`` is laid out (in, out, kh, kw).

    Output spatial size is ``(H - 1) * stride + kh``; a kernel equal to the
    stride gives an exact ``stride``-fold upsampling.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d: expected 4-D tensors, got {x.shape} and {weight.shape}")
    n, c, h, w_ = x.shape
    i, o, kh, kw = weight.shape
    if c != i:
        raise ValueError(f"conv_transpose2d: input {x.shape} has {c} channels but weight {weight.shape} expects {i}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv_transpose2d: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    ho, wo = (h - 1) * sh + kh, (w_ - 1) * sw + kw
    counters.add_macs(n * c * h * w_ * o * kh * kw)
    non_overlap = (kh, kw) == (sh, sw)
    if non_overlap:
        xm = xd.transpose(0, 2, 3, 1).reshape(-1, i)
        out = (xm @ wd.reshape(i, -1)).reshape(n, h, w_, o, kh, kw)
        out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, ho, wo)
    else:
        out = np.zeros((n, o, ho, wo))
        for a in range(kh):
            for b in range(kw):
                out[:, :, a:a + sh * h:sh, b:b + sw * w_:sw] += np.einsum(
                    "nihw,io->nohw", xd, wd[:, :, a, b], optimize=True
                )
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = gw = gb = None
        if non_overlap:
            gm = g.reshape(n, o, h, kh, w_, kw).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w_, -1)
            if x.requires_grad:
                gx = (gm @ wd.reshape(i, -1).T).reshape(n, h, w_, i).transpose(0, 3, 1, 2)
            if weight.requires_grad:
                gw = (xm.T @ gm).reshape(wd.shape)
        else:
            if x.requires_grad:
                # adjoint of the scatter is a strided correlation with the same kernel
                gx = _conv_forward(g, wd, sh, sw)[:, :, :h, :w_]
            if weight.requires_grad:
                win = _windows(g, kh, kw, sh, sw)[:, :, :h, :w_]
                gw = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out, inputs, vjp)


# activations --------------------------------------------------------------

def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return make_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_op(_softplus(xd), (x,), lambda g: (g * _stable_sigmoid(xd),))


def mish(x: Tensor) -> Tensor:
    """``x * tanh(softplus(x))``."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_softplus(xd))

    def vjp(g):
        return (g * (t + xd * (1.0 - t * t) * _stable_sigmoid(xd)),)

    return make_op(xd * t, (x,), vjp)


def softmax_rows(x: Tensor, temperature_divisor: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature_divisor``."""
    if not temperature_divisor > 0:
        raise ValueError(f"softmax_rows: temperature_divisor must be > 0, got {temperature_divisor}")
    x = as_tensor(x)
    z = x.data / temperature_divisor
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot) / temperature_divisor,)

    return make_op(p, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``offset``."""
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    c = x.shape[-1]
    if gain.shape != (c,) or offset.shape != (c,):
        raise ValueError(f"layer_norm: gain {gain.shape}/offset {offset.shape} do not match last dim of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + offset.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        go = g.sum(axis=lead) if offset.requires_grad else None
        return gx, gg, go

    return make_op(out, (x, gain, offset), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    counters.add_macs(int(np.prod(x.shape[:-1])) * wd.shape[0] * wd.shape[1])
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = g @ wd if x.requires_grad else None
        gw = np.tensordot(g, xd, axes=(lead, lead)) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=lead) if bias.requires_grad else None)

    return make_op(out, inputs, vjp)
