"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like) operands and returns a
new Tensor.  Each op supplies its exact adjoint as a closure; nothing is
approximated numerically.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    DimensionError,
    ParameterError,
    Tensor,
    as_tensor,
    make_result,
)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_result(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_result(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_result(out, (a, b), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = as_tensor(x)
    # local slope per element; np.where is several times slower on large arrays
    d = (x.data > 0).astype(x.dtype)
    d *= 1.0 - slope
    d += slope
    return make_result(x.data * d, (x,), lambda g: (g * d,))


# ---------------------------------------------------------------- reductions / shape

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(x.data[index], (x,), vjp)


def _fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
                     for i, t in enumerate(ts))

    return make_result(out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) if t.requires_grad else None for i, t in enumerate(ts))

    return make_result(out, ts, vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul inner axes differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return make_result(out, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """Fully connected layer ``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"fully_connected: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    inputs = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    out = x.data @ weight.data
    if bias is not None:
        out = out + inputs[2].data

    def vjp(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if inputs[2].requires_grad else None
        return gx, gw, gb

    return make_result(out, inputs, vjp)


fully_connected = linear


def row_norm(x) -> Tensor:
    """Euclidean norm over the last axis; the adjoint at a zero row is zero."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=-1))
    safe = np.where(out > 0, out, 1.0)
    return make_result(out, (x,), lambda g: (g[..., None] * x.data / safe[..., None],))


# ---------------------------------------------------------------- convolution

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, layout: str = "NCHW") -> Tensor:
    """2-D cross-correlation with an (out, in, kh, kw) kernel.

    ``layout`` selects NCHW (default) or channels-last NHWC for input and
    output; NHWC avoids two transposes per call and is what the estimator
    uses internally.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if layout not in ("NCHW", "NHWC"):
        raise ParameterError(f"unknown layout {layout!r}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid stride={stride} or padding={padding}")
    if layout == "NCHW":
        n, c, h, w = x.shape
    else:
        n, h, w, c = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d channel axis: input has {c}, kernel expects {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d spatial axes: kernel {(kh, kw)} exceeds padded input {(h + 2 * padding, w + 2 * padding)}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    # work channels-last; patch columns ordered (kh, kw, c)
    xl = x.data if layout == "NHWC" else x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xl
    if kh == kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride][:, :ho, :wo]).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, co)
    out = cols @ wmat
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)
    out = out.reshape(n, ho, wo, co)
    if layout == "NCHW":
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        gl = g if layout == "NHWC" else g.transpose(0, 2, 3, 1)
        gmat = gl.reshape(n * ho * wo, co)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (cols.T @ gmat).reshape(kh, kw, c, co).transpose(3, 2, 0, 1)
        if x.requires_grad:
            if kh == kw == 1 and stride == 1 and padding == 0:
                gxl = (gmat @ wmat.T).reshape(n, h, w, c)
            else:
                # one matmul per kernel offset keeps every scattered block contiguous
                w4 = wmat.reshape(kh, kw, c, co)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            (gmat @ w4[i, j].T).reshape(n, ho, wo, c)
                gxl = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
            gx = gxl if layout == "NHWC" else gxl.transpose(0, 3, 1, 2)
        if bias is not None:
            gb = gmat.sum(axis=0) if bias.requires_grad else None
            return gx, gk, gb
        return gx, gk

    return make_result(out, inputs, vjp)


# ---------------------------------------------------------------- normalisation / pooling

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.9, eps: float = 1e-5, layout: str = "NCHW") -> Tensor:
    """Per-channel batch normalisation over axes (N, H, W) or (N,) for 2-D input.

    ``layout="NHWC"`` treats the last axis of 4-D input as channels.

    In train mode the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if not 0.0 <= momentum < 1.0:
        raise ParameterError(f"batch_norm momentum must lie in [0, 1), got {momentum}")
    if np.any(running_var < 0):
        raise ParameterError("batch_norm running variance is negative")
    if x.ndim == 4 and layout == "NHWC":
        c = x.shape[3]
    elif x.ndim in (2, 4):
        c = x.shape[1]
    else:
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm parameters must have shape ({c},)")

    # reduce over a rows x channels view; channel sums go through BLAS
    nchw = x.ndim == 4 and layout != "NHWC"
    x2 = (x.data.transpose(0, 2, 3, 1) if nchw else x.data).reshape(-1, c)
    m = x2.shape[0]
    ones = np.ones(m, dtype=x2.dtype)
    if train:
        mu = (ones @ x2) / m
        xc = x2 - mu
        var = (ones @ (xc * xc)) / m
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
        xc = x2 - mu.astype(x2.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x2.dtype)
    xhat = xc * inv
    out2 = xhat * gamma.data + beta.data

    def _shape(a2):
        return a2.reshape(x.shape[0], x.shape[2], x.shape[3], c).transpose(0, 3, 1, 2) if nchw else a2.reshape(x.shape)

    def vjp(g):
        g2 = (g.transpose(0, 2, 3, 1) if nchw else g).reshape(-1, c)
        s1 = ones @ g2
        s2 = ones @ (g2 * xhat)
        gx = None
        if x.requires_grad:
            scale = gamma.data * inv
            if train:
                gx = _shape((g2 - s1 / m - xhat * (s2 / m)) * scale)
            else:
                gx = _shape(g2 * scale)
        return gx, (s2 if gamma.requires_grad else None), (s1 if beta.requires_grad else None)

    out = _shape(out2)
    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), vjp)


def batch_norm_leaky(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, train: bool,
                     slope: float = 0.1, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """``leaky_relu(batch_norm(x, ...), slope)`` on NHWC input as one node.

    Same statistics and buffer updates as :func:`batch_norm`; fusing the two
    saves several full passes over the activations in the conv stacks.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if not 0.0 <= momentum < 1.0:
        raise ParameterError(f"batch_norm momentum must lie in [0, 1), got {momentum}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm parameters must have shape ({c},)")
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    ones = np.ones(m, dtype=x2.dtype)
    if train:
        mu = (ones @ x2) / m
        xhat = x2 - mu
        var = (ones @ np.square(xhat)) / m
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
        xhat = x2 - mu.astype(x2.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x2.dtype)
    xhat *= inv
    y = xhat * gamma.data
    y += beta.data
    # local slope per element; masked ufuncs and np.where are far slower here
    d = (y > 0).astype(y.dtype)
    d *= 1.0 - slope
    d += slope
    y *= d

    def vjp(g):
        g2 = g.reshape(-1, c) * d
        s1 = ones @ g2
        tmp = g2 * xhat
        s2 = ones @ tmp
        gx = None
        if x.requires_grad:
            if train:
                np.multiply(xhat, s2 / m, out=tmp)
                g2 -= tmp
                g2 -= s1 / m
            g2 *= gamma.data * inv
            gx = g2.reshape(x.shape)
        return gx, (s2 if gamma.requires_grad else None), (s1 if beta.requires_grad else None)

    return make_result(y.reshape(x.shape), (x, gamma, beta), vjp)


def global_avg_pool(x, layout: str = "NCHW") -> Tensor:
    """Spatial mean of a 4-D batch -> N x C."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    axes = (1, 2) if layout == "NHWC" else (2, 3)
    hw = x.shape[axes[0]] * x.shape[axes[1]]
    out = x.data.mean(axis=axes)

    def vjp(g):
        gb = g[:, None, None, :] if layout == "NHWC" else g[:, :, None, None]
        return (np.broadcast_to(gb / hw, x.shape).copy(),)

    return make_result(out, (x,), vjp)


def dropout(x, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity in eval mode."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an explicit random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- losses

def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy computed from logits in a numerically stable form."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def vjp(g):
        return (g * (_sigmoid(z) - y) / n,)

    return make_result(np.asarray(loss.mean()), (logits,), vjp)


# ---------------------------------------------------------------- recurrent

def lstm_step(x, h, c, w_in, w_rec, bias, activation: str = "tanh"):
    """One LSTM cell update; gate order in the packed weights is (i, f, g, o).

    ``activation`` replaces tanh on the candidate and the output squashing,
    matching recurrent layers configured with a ReLU activation.
    Returns ``(h_new, c_new)``.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hidden = h.shape[-1]
    if w_in.shape[-1] != 4 * hidden or w_rec.shape != (hidden, 4 * hidden):
        raise DimensionError(f"lstm_step weights {w_in.shape}, {w_rec.shape} do not match hidden width {hidden}")
    act = {"tanh": tanh, "relu": relu}[activation]
    z = add(add(linear(x, w_in), linear(h, w_rec)), bias)
    i = sigmoid(z[:, 0 * hidden:1 * hidden])
    f = sigmoid(z[:, 1 * hidden:2 * hidden])
    g = act(z[:, 2 * hidden:3 * hidden])
    o = sigmoid(z[:, 3 * hidden:4 * hidden])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, act(c_new))
    return h_new, c_new
