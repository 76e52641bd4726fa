"""Dense NHWC tensor operations with hand-written adjoints.

Tensors are plain ``numpy.ndarray`` objects laid out as (N, H, W, C). Every
forward operation has a matching ``*_vjp`` function that maps an upstream
gradient back to gradients of the inputs (and parameters). Forward functions
never modify their inputs.

Convolution weights use the layout (filter_h, filter_w, in_ch, out_ch).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


def output_extent(size: int, filt: int, pad_total: int, stride: int) -> int:
    """floor((W - F + 2P) / S) + 1, with ``pad_total`` = 2P."""
    return (size - filt + pad_total) // stride + 1


def _check_rank4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (N,H,W,C), got shape {x.shape}")


def resolve_padding(padding, size_h: int, size_w: int, fh: int, fw: int,
                    stride: int) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right) padding.

    ``padding`` is a non-negative int, ``"valid"`` or ``"same"``. For ``same``
    an odd total puts the extra row/column at the bottom/right.
    """
    if isinstance(padding, str):
        if padding == "valid":
            return 0, 0, 0, 0
        if padding != "same":
            raise ValueError(f"unknown padding mode {padding!r}")
        out_h = -(-size_h // stride)
        out_w = -(-size_w // stride)
        th = max((out_h - 1) * stride + fh - size_h, 0)
        tw = max((out_w - 1) * stride + fw - size_w, 0)
        return th // 2, th - th // 2, tw // 2, tw - tw // 2
    p = int(padding)
    if p < 0:
        raise ValueError("padding must be non-negative")
    return p, p, p, p


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Filter geometry plus weights for a 2-D convolution."""

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int | str = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be (fh, fw, in, out), got {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[3],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_ch {self.weights.shape[3]}")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def filter_h(self) -> int:
        return self.weights.shape[0]

    @property
    def filter_w(self) -> int:
        return self.weights.shape[1]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[2]

    @property
    def out_ch(self) -> int:
        return self.weights.shape[3]


def _conv_geometry(x, w, stride, padding):
    _check_rank4(x)
    n, h, wd, c = x.shape
    fh, fw, cin, cout = w.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels but weights expect {cin} "
                         f"(input {x.shape}, weights {w.shape})")
    pads = resolve_padding(padding, h, wd, fh, fw, stride)
    ho = output_extent(h, fh, pads[0] + pads[1], stride)
    wo = output_extent(wd, fw, pads[2] + pads[3], stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive output extent ({ho}, {wo}) for input {x.shape}, "
                         f"filter {fh}x{fw}, stride {stride}, padding {pads}")
    return pads, ho, wo


def _pad(x, pads):
    t, b, l, r = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))


def _windows(xp, fh, fw, stride, ho, wo):
    # (N, Ho, Wo, C, fh, fw)
    win = sliding_window_view(xp, (fh, fw), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
           stride: int = 1, padding: int | str = 0) -> np.ndarray:
    """Cross-correlate ``x`` with ``w`` and add ``b``."""
    pads, ho, wo = _conv_geometry(x, w, stride, padding)
    fh, fw = w.shape[:2]
    win = _windows(_pad(x, pads), fh, fw, stride, ho, wo)
    y = np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1]))
    if b is not None:
        y = y + b
    return y


def conv2d_spec(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    return conv2d(x, spec.weights, spec.bias, spec.stride, spec.padding)


def conv2d_vjp(dy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1,
               padding: int | str = 0):
    """Gradients (dx, dw, db) of a conv2d output."""
    pads, ho, wo = _conv_geometry(x, w, stride, padding)
    fh, fw = w.shape[:2]
    xp = _pad(x, pads)
    win = _windows(xp, fh, fw, stride, ho, wo)
    dw = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dy.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    for i in range(fh):
        for j in range(fw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dy @ w[i, j].T
    t, bt, l, r = pads
    dx = dxp[:, t : xp.shape[1] - bt, l : xp.shape[2] - r]
    return dx, dw.astype(w.dtype, copy=False), db


def conv_transpose2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                     stride: int = 2) -> np.ndarray:
    """Scatter-add a kernel copy per input cell at ``stride`` spacing.

    Output extent is (H - 1) * stride + filter_h.
    """
    _check_rank4(x)
    fh, fw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels but weights expect {cin}")
    n, h, wd, _ = x.shape
    y = np.zeros((n, (h - 1) * stride + fh, (wd - 1) * stride + fw, cout), dtype=np.result_type(x, w))
    for i in range(fh):
        for j in range(fw):
            y[:, i : i + stride * h : stride, j : j + stride * wd : stride] += x @ w[i, j]
    if b is not None:
        y += b
    return y


def conv_transpose2d_vjp(dy, x, w, stride: int = 2):
    fh, fw = w.shape[:2]
    h, wd = x.shape[1:3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for i in range(fh):
        for j in range(fw):
            blk = dy[:, i : i + stride * h : stride, j : j + stride * wd : stride]
            dx += blk @ w[i, j].T
            dw[i, j] = np.tensordot(x, blk, axes=([0, 1, 2], [0, 1, 2]))
    return dx, dw, dy.sum(axis=(0, 1, 2))


# ---------------------------------------------------------------------------
# pooling and un-pooling


def _pool_geometry(x, window, stride):
    _check_rank4(x)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    h, w = x.shape[1:3]
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than spatial extent {(h, w)}")
    return (h - window) // stride + 1, (w - window) // stride + 1


def pool2d(x: np.ndarray, window: int = 2, stride: int = 2, mode: str = "max"):
    """Return (pooled, switches). Switches are None for average pooling.

    A switch is the flat index ``row * window + col`` of the selected maximum
    inside its window.
    """
    ho, wo = _pool_geometry(x, window, stride)
    win = _windows(x, window, window, stride, ho, wo)
    flat = win.reshape(win.shape[:4] + (window * window,))
    if mode == "max":
        switches = flat.argmax(axis=-1)
        return np.take_along_axis(flat, switches[..., None], axis=-1)[..., 0], switches
    if mode == "avg":
        return flat.mean(axis=-1), None
    raise ValueError(f"unknown pool mode {mode!r}")


def _scatter_windows(vals, switches, window, stride, shape):
    """Add ``vals`` into zeros(shape) at the switch positions."""
    n, ho, wo, c = vals.shape
    out = np.zeros(shape, dtype=vals.dtype)
    di, dj = np.divmod(switches, window)
    rows = np.arange(ho)[None, :, None, None] * stride + di
    cols = np.arange(wo)[None, None, :, None] * stride + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, None, None, :]
    np.add.at(out, (nn, rows, cols, cc), vals)
    return out


def pool2d_vjp(dy, x_shape, window=2, stride=2, mode="max", switches=None):
    if mode == "max":
        if switches is None:
            raise ValueError("max-pool adjoint needs switches")
        return _scatter_windows(dy, switches, window, stride, x_shape)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ho, wo = dy.shape[1:3]
    share = dy / (window * window)
    for i in range(window):
        for j in range(window):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
    return dx


def unpool(values: np.ndarray, switches: np.ndarray, out_shape: Sequence[int],
           window: int = 2, stride: int = 2) -> np.ndarray:
    """Place each value at its switch position in a zero grid of ``out_shape``."""
    _check_rank4(values, "values")
    out_shape = tuple(out_shape)
    if switches.shape != values.shape:
        raise ShapeError(f"switches shape {switches.shape} != values shape {values.shape}")
    if len(out_shape) != 4 or out_shape[0] != values.shape[0] or out_shape[3] != values.shape[3]:
        raise ShapeError(f"target shape {out_shape} incompatible with values {values.shape}")
    ho, wo = values.shape[1:3]
    if (ho - 1) * stride + window > out_shape[1] or (wo - 1) * stride + window > out_shape[2]:
        raise ShapeError(f"{ho}x{wo} windows do not fit target {out_shape[1:3]}")
    if switches.size and (switches.min() < 0 or switches.max() >= window * window):
        raise ShapeError("switch index outside its window")
    return _scatter_windows(values, switches, window, stride, out_shape)


def unpool_vjp(dy, switches, window=2, stride=2):
    n, ho, wo, c = switches.shape
    di, dj = np.divmod(switches, window)
    rows = np.arange(ho)[None, :, None, None] * stride + di
    cols = np.arange(wo)[None, None, :, None] * stride + dj
    return dy[np.arange(n)[:, None, None, None], rows, cols, np.arange(c)]


# ---------------------------------------------------------------------------
# upsampling


def nearest_upsample(x: np.ndarray, factor: int = 2) -> np.ndarray:
    _check_rank4(x)
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def nearest_upsample_vjp(dy, factor=2):
    n, h, w, c = dy.shape
    return dy.reshape(n, h // factor, factor, w // factor, factor, c).sum(axis=(2, 4))


def depth_to_space(x: np.ndarray, r: int = 2) -> np.ndarray:
    """Pixel shuffle: out[y, x, c] = in[y // r, x // r, c*r*r + (y % r)*r + x % r]."""
    _check_rank4(x)
    n, h, w, ch = x.shape
    if ch % (r * r):
        raise ShapeError(f"channel count {ch} not divisible by r^2 = {r * r}")
    c = ch // (r * r)
    return x.reshape(n, h, w, c, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(n, h * r, w * r, c)


def space_to_depth(x: np.ndarray, r: int = 2) -> np.ndarray:
    """Exact inverse of :func:`depth_to_space`."""
    _check_rank4(x)
    n, h, w, c = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial extent {(h, w)} not divisible by {r}")
    return x.reshape(n, h // r, r, w // r, r, c).transpose(0, 1, 3, 5, 2, 4).reshape(
        n, h // r, w // r, c * r * r)


def upsample(x: np.ndarray, mode: str, factor: int = 2, aux=None, out_shape=None) -> np.ndarray:
    """Dispatch to one of the four upsampling algorithms.

    ``aux`` is the switch array for ``unpool`` (with ``out_shape``) and a
    :class:`ConvSpec` for ``transpose``; the other modes take none.
    """
    if mode == "nearest":
        return nearest_upsample(x, factor)
    if mode == "pixel_shuffle":
        return depth_to_space(x, factor)
    if mode == "unpool":
        if aux is None or out_shape is None:
            raise ValueError("unpool needs switches and a target shape")
        return unpool(x, aux, out_shape, window=factor, stride=factor)
    if mode == "transpose":
        if not isinstance(aux, ConvSpec):
            raise ValueError("transpose upsampling needs a ConvSpec")
        return conv_transpose2d(x, aux.weights, aux.bias, aux.stride)
    raise ValueError(f"unknown upsample mode {mode!r}")


# ---------------------------------------------------------------------------
# normalization and activations


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, mode: str = "train",
              eps: float = 1e-5, running: tuple[np.ndarray, np.ndarray] | None = None,
              momentum: float = 0.9):
    """Per-channel batch normalization.

    Returns ``(y, (mean, var))``: in train mode the second item is the updated
    running statistics, in infer mode it is the statistics that were used.
    """
    c = x.shape[-1]
    if x.size == 0:
        raise ShapeError("batchnorm over an empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have extent {c}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running is None:
            new = (mu, var)
        else:
            new = (momentum * running[0] + (1 - momentum) * mu,
                   momentum * running[1] + (1 - momentum) * var)
    elif mode == "infer":
        if running is None:
            raise ValueError("infer mode needs running statistics")
        mu, var = running
        new = running
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    xhat = (x - mu) / np.sqrt(var + eps)
    return gamma * xhat + beta, new


def batchnorm_vjp(dy, x, gamma, mode="train", eps=1e-5, running=None):
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mu, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    if mode == "train":
        m = x.size // x.shape[-1]
        dx = (gamma * inv / m) * (m * dy - dbeta - xhat * dgamma)
    else:
        dx = dy * gamma * inv
    return dx, dgamma, dbeta


ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax", "linear")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    """Apply an activation; softmax runs along the channel (last) axis."""
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax":
        return softmax(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activate_vjp(dy: np.ndarray, x: np.ndarray, kind: str, y: np.ndarray | None = None):
    if y is None:
        y = activate(x, kind)
    if kind == "relu":
        return dy * (x > 0)
    if kind == "sigmoid":
        return dy * y * (1 - y)
    if kind == "tanh":
        return dy * (1 - y * y)
    if kind == "softmax":
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    if kind == "linear":
        return dy
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: tuple[int, int] | None  # (input index, flat element index)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __bool__(self):
        return self.passed


def grad_check(fn: Callable[..., np.ndarray], vjp: Callable[..., Sequence[np.ndarray]],
               inputs: Sequence[np.ndarray], tolerance: float = 1e-4, step: float = 1e-6,
               seed: int = 0, wrt: Sequence[int] | None = None) -> GradCheckReport:
    """Compare ``vjp`` against central differences of ``fn``.

    The scalar probed is ``sum(fn(*inputs) * r)`` for a fixed random ``r``, so
    ``vjp(r, *inputs)`` must return one gradient per input (same order).
    Element error is ``|a - n| / max(|a|, |n|, 1e-3 * peak)`` where ``peak``
    is the largest numeric gradient magnitude for that input; this keeps
    near-zero entries from dominating through rounding noise.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out = fn(*inputs)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = vjp(r, *inputs)
    wrt = range(len(inputs)) if wrt is None else wrt

    worst_err, worst_at = 0.0, None
    for k in wrt:
        a = np.asarray(analytic[k], dtype=np.float64)
        if a.shape != inputs[k].shape:
            raise ShapeError(f"gradient {k} has shape {a.shape}, input has {inputs[k].shape}")
        if not np.all(np.isfinite(a)):
            bad = int(np.flatnonzero(~np.isfinite(a))[0])
            return GradCheckReport(float("inf"), tolerance, (k, bad))
        num = np.zeros(inputs[k].size)
        flat = inputs[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float((fn(*inputs) * r).sum())
            flat[i] = orig - step
            fm = float((fn(*inputs) * r).sum())
            flat[i] = orig
            num[i] = (fp - fm) / (2 * step)
        if not np.all(np.isfinite(num)):
            bad = int(np.flatnonzero(~np.isfinite(num))[0])
            return GradCheckReport(float("inf"), tolerance, (k, bad))
        a = a.reshape(-1)
        peak = np.abs(num).max() if num.size else 0.0
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), max(1e-3 * peak, 1e-12))
        err = np.abs(a - num) / denom
        if err.size and err.max() > worst_err:
            worst_err, worst_at = float(err.max()), (k, int(err.argmax()))
    return GradCheckReport(worst_err, tolerance, worst_at)
