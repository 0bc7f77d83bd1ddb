"""Differentiable primitives. Every function records itself on the tape."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ParameterError
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ParameterError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_result(out, (a, b), bw, "div")


def elementwise(x, fn: Callable[[np.ndarray], np.ndarray],
                dfn: Callable[[np.ndarray, np.ndarray], np.ndarray], op: str) -> Tensor:
    """Apply ``fn`` elementwise; ``dfn(x, y)`` returns dy/dx given input and output."""
    x = as_tensor(x)
    y = fn(x.data)

    def bw(g):
        return (g * dfn(x.data, y),)

    return make_result(y, (x,), bw, op)


def square(x) -> Tensor:
    return elementwise(x, np.square, lambda x, y: 2.0 * x, "square")


def exp(x) -> Tensor:
    return elementwise(x, np.exp, lambda x, y: y, "exp")


def log(x) -> Tensor:
    return elementwise(x, np.log, lambda x, y: 1.0 / x, "log")


def absolute(x) -> Tensor:
    # subgradient 0 at the kink
    return elementwise(x, np.abs, lambda x, y: np.sign(x), "abs")


def relu(x) -> Tensor:
    return elementwise(x, lambda v: np.maximum(v, 0.0), lambda x, y: (x > 0).astype(np.float64), "relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    return elementwise(x, _stable_sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


def tanh(x) -> Tensor:
    return elementwise(x, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ParameterError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), bw, "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return make_result(np.transpose(x.data, axes), (x,), bw, "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(out), (x,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ParameterError("concat: empty input list")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ParameterError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def concat_channels(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=1)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def reduce_extreme(x, axis: int, mode: str = "max", keepdims: bool = False) -> Tensor:
    """Max or min along ``axis``; the gradient flows to the first selected entry."""
    x = as_tensor(x)
    if mode not in ("max", "min"):
        raise ParameterError(f"reduce_extreme: mode must be max or min, got {mode!r}")
    idx = np.argmax(x.data, axis=axis) if mode == "max" else np.argmin(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx_k, gk, axis=axis)
        return (full,)

    return make_result(out, (x,), bw, f"reduce_{mode}")


def softmax(x, axis: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / np.where(denom > 0, denom, 1.0)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return make_result(y, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def _require_4d(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ParameterError(f"{op}: expected (n, c, h, w) input, got shape {x.shape}")


def maxpool2x2(x) -> Tensor:
    x = as_tensor(x)
    _require_4d("maxpool2x2", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ParameterError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gb,)

    return make_result(out, (x,), bw, "maxpool2x2")


def global_avg_pool(x) -> Tensor:
    """(n, c, h, w) -> (n, c)."""
    x = as_tensor(x)
    _require_4d("global_avg_pool", x)
    return mean(x, axis=(2, 3))


def _bilinear_matrix(size: int, factor: int) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) / factor - 0.5, clamped at the borders
    out_size = size * factor
    src = (np.arange(out_size) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    lam = src - i0
    m = np.zeros((out_size, size))
    np.add.at(m, (np.arange(out_size), i0), 1.0 - lam)
    np.add.at(m, (np.arange(out_size), i1), lam)
    return m


def bilinear_upsample(x, factor: int) -> Tensor:
    x = as_tensor(x)
    _require_4d("bilinear_upsample", x)
    if not isinstance(factor, (int, np.integer)) or factor < 1 or factor & (factor - 1):
        raise ParameterError(f"bilinear_upsample: factor must be a power of two >= 1, got {factor}")
    if factor == 1:
        return x
    _, _, h, w = x.shape
    mh, mw = _bilinear_matrix(h, factor), _bilinear_matrix(w, factor)
    out = np.einsum("ij,ncjk,lk->ncil", mh, x.data, mw, optimize=True)

    def bw(g):
        return (np.einsum("ij,ncil,lk->ncjk", mh, g, mw, optimize=True),)

    return make_result(out, (x,), bw, "bilinear_upsample")


# ---------------------------------------------------------------------------
# convolutions and normalization
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(n, c, H, W) padded input -> (n*ho*wo, k*k*c) patch matrix, channels fastest."""
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xl[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def conv2d(x, weight, bias=None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """2D cross-correlation. ``padding=None`` means shape-preserving ``(k-1)/2``."""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_4d("conv2d", x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ParameterError(f"conv2d: weight must be (c_out, c_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 == 0:
        raise ParameterError(f"conv2d: kernel size must be odd, got {k}")
    if x.shape[1] != c_in:
        raise ParameterError(f"conv2d: input has {x.shape[1]} channels, weight expects {c_in}")
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be >= 1, got {stride}")
    p = (k - 1) // 2 if padding is None else padding
    n, _, h, w = x.shape
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ParameterError(f"conv2d: empty output for input {h}x{w}, k={k}, padding={p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ParameterError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")
        out += bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        if stride == 1 and p <= k - 1:
            # input gradient is a full correlation of g with the flipped kernel
            q = k - 1 - p
            gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else g
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c_in, -1)
            gx = (_im2col(gp, k, 1, h, w) @ wflip.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        else:
            gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c_in)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, bw, "conv2d")


def conv1d(x, kernel) -> Tensor:
    """Zero-padded 1D correlation of an (n, m) vector batch with an odd kernel, no bias."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 1 or kernel.shape[0] % 2 == 0:
        raise ParameterError(f"conv1d: need (n, m) input and odd 1D kernel, got {x.shape}, {kernel.shape}")
    k = kernel.shape[0]
    p = k // 2
    n, m = x.shape
    xp = np.pad(x.data, ((0, 0), (p, p)))
    cols = np.stack([xp[:, i:i + m] for i in range(k)], axis=-1)  # (n, m, k)
    out = cols @ kernel.data

    def bw(g):
        gk = np.einsum("nm,nmk->k", g, cols)
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[:, i:i + m] += g * kernel.data[i]
        return gxp[:, p:p + m], gk

    return make_result(out, (x, kernel), bw, "conv1d")


class BatchNormState:
    """Running statistics of one batch-norm layer (not trained by gradient)."""

    def __init__(self, channels: int, momentum: float = 0.9):
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.populated = False


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str = "train", eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _require_4d("batch_norm", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ParameterError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    count = n * h * w
    if count == 0:
        raise ParameterError("batch_norm: zero-size batch")
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * count / max(count - 1, 1)
        m = state.momentum
        if state.populated:
            state.running_mean = m * state.running_mean + (1 - m) * mu
            state.running_var = m * state.running_var + (1 - m) * unbiased
        else:
            state.running_mean = mu.copy()
            state.running_var = unbiased.copy()
            state.populated = True
    elif mode == "eval":
        if not state.populated:
            raise ParameterError("batch_norm: eval mode needs populated running statistics")
        mu, var = state.running_mean, state.running_var
    else:
        raise ParameterError(f"batch_norm: mode must be train or eval, got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if mode == "train":
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] / count * (count * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw, "batch_norm")


def window_unfold(x, window: int) -> Tensor:
    """Gather each pixel's ``window x window`` neighbourhood, zero-padded.

    (n, c, h, w) -> (n, c, window**2, h, w); offsets are enumerated row-major.
    """
    x = as_tensor(x)
    _require_4d("window_unfold", x)
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window_unfold: window must be odd and >= 1, got {window}")
    r = window // 2
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.empty((n, c, window * window, h, w))
    for i in range(window):
        for j in range(window):
            out[:, :, i * window + j] = xp[:, :, i:i + h, j:j + w]

    def bw(g):
        gxp = np.zeros_like(xp)
        for i in range(window):
            for j in range(window):
                gxp[:, :, i:i + h, j:j + w] += g[:, :, i * window + j]
        return (gxp[:, :, r:r + h, r:r + w],)

    return make_result(out, (x,), bw, "window_unfold")
