"""Differentiable network primitives: convolution, batch norm, activations,
pooling, linear, softmax cross-entropy, and elementwise helpers.

Every operation preserves the dtype of its inputs. Training code runs in
float32; gradient-check harnesses may push float64 through the same paths.
The ``*_raw`` helpers compute forward values on plain arrays and are shared
with compiled (post-search) networks so both paths are numerically identical.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Tensor, accumulate_grad, make_node

__all__ = [
    "conv2d", "batch_norm", "relu", "prelu", "tanh", "max_pool2d", "avg_pool2d",
    "global_avg_pool", "linear", "flatten", "add", "add_n", "scale",
    "softmax_cross_entropy", "accuracy", "kaiming_uniform",
    "conv2d_raw", "batch_norm_eval_raw", "activation_raw",
    "max_pool2d_raw", "avg_pool2d_raw", "global_avg_pool_raw", "linear_raw",
]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv_args(xd, wd, stride, padding, groups):
    if xd.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got shape {xd.shape}")
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise DimensionError(f"conv2d expects square (C_out, C_in/groups, k, k) weight, got {wd.shape}")
    k = wd.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    c_in = xd.shape[1]
    c_out = wd.shape[0]
    if groups < 1 or c_in % groups != 0:
        raise ConfigError(f"groups={groups} does not divide input channels {c_in}")
    if c_out % groups != 0:
        raise ConfigError(f"groups={groups} does not divide output channels {c_out}")
    if wd.shape[1] != c_in // groups:
        raise DimensionError(
            f"weight expects {wd.shape[1] * groups} input channels (groups={groups}), input has {c_in}"
        )
    if xd.shape[2] + 2 * padding < k or xd.shape[3] + 2 * padding < k:
        raise DimensionError(
            f"kernel {k} larger than padded input {xd.shape[2:]} with padding {padding}"
        )


def _windows(xd, k, stride, padding):
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return xp, win


def _scatter_windows(dwin, xp_shape, k, stride, dtype):
    # dwin: (N, C, H_out, W_out, k, k) gradient per window element -> padded input
    n, c, h_out, w_out = dwin.shape[:4]
    dxp = np.zeros(xp_shape, dtype=dtype)
    for i in range(k):
        he = i + stride * (h_out - 1) + 1
        for j in range(k):
            we = j + stride * (w_out - 1) + 1
            dxp[:, :, i:he:stride, j:we:stride] += dwin[:, :, :, :, i, j]
    return dxp


def _conv_forward(xd, wd, bd, stride, padding, groups):
    n, c_in, _, _ = xd.shape
    c_out, _, k, _ = wd.shape
    xp, win = _windows(xd, k, stride, padding)
    h_out, w_out = win.shape[2], win.shape[3]
    if groups == 1:
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h_out * w_out, c_in * k * k)
        wmat = wd.reshape(c_out, -1)
        out = (cols @ wmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
        ctx = ("dense", xp.shape, cols)
    elif groups == c_in and c_out == c_in:
        out = np.einsum("nchwij,cij->nchw", win, wd[:, 0], optimize=True)
        ctx = ("depthwise", xp.shape, win)
    else:
        cg_in, cg_out = c_in // groups, c_out // groups
        out = np.empty((n, c_out, h_out, w_out), dtype=xd.dtype)
        saved = []
        for gi in range(groups):
            wg = wd[gi * cg_out:(gi + 1) * cg_out].reshape(cg_out, -1)
            sub = win[:, gi * cg_in:(gi + 1) * cg_in]
            colsg = np.ascontiguousarray(sub.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h_out * w_out, cg_in * k * k)
            og = (colsg @ wg.T).reshape(n, h_out, w_out, cg_out).transpose(0, 3, 1, 2)
            out[:, gi * cg_out:(gi + 1) * cg_out] = og
            saved.append(colsg)
        ctx = ("grouped", xp.shape, saved)
    out = np.ascontiguousarray(out)
    if bd is not None:
        out += bd[None, :, None, None]
    return out, ctx


def _conv_backward(ctx, xd, wd, stride, padding, groups, g, need_dx, need_dw):
    mode, xp_shape, saved = ctx
    n, c_in = xd.shape[0], xd.shape[1]
    c_out, _, k, _ = wd.shape
    h_out, w_out = g.shape[2], g.shape[3]
    dx = dw = None
    if mode == "dense":
        cols = saved
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        if need_dw:
            dw = (gm.T @ cols).reshape(wd.shape)
        if need_dx:
            dcols = (gm @ wd.reshape(c_out, -1)).reshape(n, h_out, w_out, c_in, k, k)
            dwin = dcols.transpose(0, 3, 1, 2, 4, 5)
            dx = _scatter_windows(dwin, xp_shape, k, stride, xd.dtype)
    elif mode == "depthwise":
        win = saved
        if need_dw:
            dw = np.einsum("nchwij,nchw->cij", win, g, optimize=True)[:, None]
        if need_dx:
            dwin = g[:, :, :, :, None, None] * wd[:, 0][None, :, None, None, :, :]
            dx = _scatter_windows(dwin, xp_shape, k, stride, xd.dtype)
    else:
        cg_in, cg_out = c_in // groups, c_out // groups
        if need_dw:
            dw = np.empty_like(wd)
        if need_dx:
            dx = np.zeros(xp_shape, dtype=xd.dtype)
        for gi, colsg in enumerate(saved):
            gg = np.ascontiguousarray(g[:, gi * cg_out:(gi + 1) * cg_out].transpose(0, 2, 3, 1)).reshape(-1, cg_out)
            wg = wd[gi * cg_out:(gi + 1) * cg_out]
            if need_dw:
                dw[gi * cg_out:(gi + 1) * cg_out] = (gg.T @ colsg).reshape(wg.shape)
            if need_dx:
                dcols = (gg @ wg.reshape(cg_out, -1)).reshape(n, h_out, w_out, cg_in, k, k)
                dwin = dcols.transpose(0, 3, 1, 2, 4, 5)
                dx[:, gi * cg_in:(gi + 1) * cg_in] += _scatter_windows(
                    dwin, (n, cg_in) + xp_shape[2:], k, stride, xd.dtype)
    if dx is not None and padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx, dw


def conv2d_raw(xd, wd, bd=None, stride=1, padding=0, groups=1):
    """Forward-only convolution on plain arrays (shared with compiled nets)."""
    _check_conv_args(xd, wd, stride, padding, groups)
    return _conv_forward(xd, wd, bd, stride, padding, groups)[0]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation over NCHW input.

    ``weight`` has shape (C_out, C_in/groups, k, k); ``groups == C_in`` with
    C_out == C_in is the depthwise case. Output spatial size is
    ``floor((H + 2*padding - k) / stride) + 1``.
    """
    xd, wd = x.data, weight.data
    _check_conv_args(xd, wd, stride, padding, groups)
    bd = bias.data if bias is not None else None
    out, ctx = _conv_forward(xd, wd, bd, stride, padding, groups)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        dx, dw = _conv_backward(ctx, xd, wd, stride, padding, groups, g,
                                x.requires_grad, weight.requires_grad)
        if dx is not None:
            accumulate_grad(x, dx)
        if dw is not None:
            accumulate_grad(weight, dw)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))

    return make_node(out, parents, bw)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm_eval_raw(xd, gamma, beta, running_mean, running_var, eps):
    inv = 1.0 / np.sqrt(running_var.astype(xd.dtype) + eps)
    xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes by batch statistics and folds them into the
    running buffers (in place); eval mode normalizes by the running buffers.
    """
    if eps <= 0:
        raise ConfigError(f"batch norm epsilon must be > 0, got {eps}")
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW input, got shape {xd.shape}")
    c = xd.shape[1]
    for nm, arr in (("gamma", gamma.data), ("beta", beta.data),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batch_norm {nm} must have shape ({c},), got {arr.shape}")

    axes = (0, 2, 3)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        cnt = xd.shape[0] * xd.shape[2] * xd.shape[3]
        unbiased = var * (cnt / (cnt - 1)) if cnt > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=axes))
        if x.requires_grad:
            gscaled = g * gamma.data[None, :, None, None]
            if training:
                m = xd.shape[0] * xd.shape[2] * xd.shape[3]
                s1 = gscaled.sum(axis=axes, keepdims=True)
                s2 = (gscaled * xhat).sum(axis=axes, keepdims=True)
                dx = inv[None, :, None, None] / m * (m * gscaled - s1 - xhat * s2)
            else:
                dx = gscaled * inv[None, :, None, None]
            accumulate_grad(x, dx)

    return make_node(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def activation_raw(xd, kind, slope=None):
    if kind == "relu":
        return np.maximum(xd, 0)
    if kind == "prelu":
        return np.where(xd > 0, xd, slope[None, :, None, None] * xd)
    if kind == "tanh":
        return np.tanh(xd)
    if kind == "none":
        return xd
    raise ConfigError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        if x.requires_grad:
            accumulate_grad(x, g * pos)

    return make_node(np.maximum(x.data, 0), (x,), bw)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with one learnable slope per channel (axis 1 of NCHW)."""
    xd = x.data
    if xd.ndim != 4 or slope.data.shape != (xd.shape[1],):
        raise DimensionError(
            f"prelu expects NCHW input with per-channel slope; got {xd.shape} and {slope.data.shape}")
    pos = xd > 0
    a = slope.data[None, :, None, None]
    out = np.where(pos, xd, a * xd)

    def bw(g):
        if x.requires_grad:
            accumulate_grad(x, g * np.where(pos, xd.dtype.type(1), a))
        if slope.requires_grad:
            accumulate_grad(slope, (g * xd * ~pos).sum(axis=(0, 2, 3)))

    return make_node(out, (x, slope), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        if x.requires_grad:
            accumulate_grad(x, g * (1.0 - out * out))

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_windows(xd, kernel, stride):
    if xd.ndim != 4:
        raise DimensionError(f"pooling expects NCHW input, got shape {xd.shape}")
    if xd.shape[2] < kernel or xd.shape[3] < kernel:
        raise DimensionError(f"pool kernel {kernel} larger than input {xd.shape[2:]}")
    return sliding_window_view(xd, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def max_pool2d_raw(xd, kernel, stride=None):
    stride = stride or kernel
    win = _pool_windows(xd, kernel, stride)
    return np.ascontiguousarray(win.max(axis=(4, 5)))


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    xd = x.data
    win = _pool_windows(xd, kernel, stride)
    n, c, h_out, w_out = win.shape[:4]
    flat = win.reshape(n, c, h_out, w_out, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.ascontiguousarray(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def bw(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(xd)
        gn, gc, gh, gw = np.ogrid[:n, :c, :h_out, :w_out]
        hy = gh * stride + arg // kernel
        wx = gw * stride + arg % kernel
        np.add.at(dx, (gn, gc, hy, wx), g)
        accumulate_grad(x, dx)

    return make_node(out, (x,), bw)


def avg_pool2d_raw(xd, kernel, stride=None):
    stride = stride or kernel
    win = _pool_windows(xd, kernel, stride)
    return np.ascontiguousarray(win.mean(axis=(4, 5)))


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    xd = x.data
    win = _pool_windows(xd, kernel, stride)
    n, c, h_out, w_out = win.shape[:4]
    out = np.ascontiguousarray(win.mean(axis=(4, 5)))

    def bw(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(xd)
        share = g / (kernel * kernel)
        for i in range(kernel):
            he = i + stride * (h_out - 1) + 1
            for j in range(kernel):
                we = j + stride * (w_out - 1) + 1
                dx[:, :, i:he:stride, j:we:stride] += share
        accumulate_grad(x, dx)

    return make_node(out, (x,), bw)


def global_avg_pool_raw(xd):
    return xd.mean(axis=(2, 3))


def global_avg_pool(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW input, got shape {xd.shape}")
    out = xd.mean(axis=(2, 3))
    area = xd.shape[2] * xd.shape[3]

    def bw(g):
        if x.requires_grad:
            accumulate_grad(x, np.broadcast_to(g[:, :, None, None], xd.shape) / area)

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear / reshapes / elementwise
# ---------------------------------------------------------------------------

def linear_raw(xd, wd, bd=None):
    out = xd @ wd.T
    if bd is not None:
        out = out + bd[None, :]
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map; ``weight`` has shape (out_features, in_features)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"linear: incompatible shapes {xd.shape} and {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data[None, :]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            accumulate_grad(x, g @ wd)
        if weight.requires_grad:
            accumulate_grad(weight, g.T @ xd)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=0))

    return make_node(out, parents, bw)


def flatten(x: Tensor) -> Tensor:
    xd = x.data
    out = xd.reshape(xd.shape[0], -1)

    def bw(g):
        if x.requires_grad:
            accumulate_grad(x, g.reshape(xd.shape))

    return make_node(out, (x,), bw)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (skip connections)."""
    if x.data.shape != y.data.shape:
        raise DimensionError(f"add: shapes {x.data.shape} and {y.data.shape} differ")
    return x + y


def add_n(tensors) -> Tensor:
    """Sum a list of same-shape tensors in one node (layer-output averaging)."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("add_n needs at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise DimensionError(f"add_n: shapes {shape} and {t.data.shape} differ")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def bw(g):
        for t in tensors:
            if t.requires_grad:
                accumulate_grad(t, g)

    return make_node(out, tuple(tensors), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (e.g. the fixed 1/M layer divisor)."""
    return x * float(c)


# ---------------------------------------------------------------------------
# loss / metrics
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between ``logits`` (N, K) and integer ``labels``."""
    zd = logits.data
    if zd.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (N, K) logits, got {zd.shape}")
    labels = np.asarray(labels)
    if labels.shape != (zd.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {zd.shape[0]}")
    n = zd.shape[0]
    zmax = zd.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(zd - zmax).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - zd[np.arange(n), labels]
    loss = np.asarray(nll.mean(), dtype=zd.dtype)
    probs = np.exp(zd - lse)

    def bw(g):
        if logits.requires_grad:
            dz = probs.copy()
            dz[np.arange(n), labels] -= 1.0
            accumulate_grad(logits, dz * (g / n))

    return make_node(loss, (logits,), bw)


def accuracy(logits_data: np.ndarray, labels: np.ndarray) -> float:
    return float((logits_data.argmax(axis=1) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """Kaiming-uniform fan-in initialization (ReLU gain)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
