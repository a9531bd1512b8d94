"""Primitive layers, each as a forward/backward function pair plus a graph Op.

The functional pairs follow the ``out, cache = f_forward(...)`` /
``grads = f_backward(dout, cache)`` convention; the :class:`~proxygrad.autograd.Op`
subclasses wrap them for use in a :class:`~proxygrad.autograd.Graph`.
Arrays are NCHW for images and ``(N, D)`` for flat features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Op
from .tensor_core import DTYPE

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ActivationRule:
    """Negative slopes for the forward and the backward pass.

    ``(0, 0)`` is ReLU, ``(s, s)`` Leaky ReLU and ``(0, s)`` ReLU with
    ProxyGrad: the network computes ReLU but back-propagates as if it were a
    Leaky ReLU with slope ``s``, evaluated at the ReLU network's activations.
    """

    forward_slope: float = 0.0
    backward_slope: float = 0.0

    def __post_init__(self):
        for name in ("forward_slope", "backward_slope"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def relu(cls) -> "ActivationRule":
        return cls(0.0, 0.0)

    @classmethod
    def leaky(cls, slope: float) -> "ActivationRule":
        return cls(slope, slope)

    @classmethod
    def proxygrad(cls, slope: float, forward_slope: float = 0.0) -> "ActivationRule":
        return cls(forward_slope, slope)

    @classmethod
    def from_mode(cls, mode: str, slope: float = 0.0, forward_slope: float = 0.0):
        """Build a rule from a CLI-style mode name: relu, lrelu/leaky, proxygrad."""
        if mode == "relu":
            return cls.relu()
        if mode in ("lrelu", "leaky"):
            return cls.leaky(slope)
        if mode == "proxygrad":
            return cls.proxygrad(slope, forward_slope)
        raise ValueError(f"unknown activation mode {mode!r}")


# --------------------------------------------------------------------------
# Activation


def activation_forward(x, rule: ActivationRule):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, rule.forward_slope * x)


def activation_backward(x, dout, rule: ActivationRule):
    # x == 0 takes factor 1: the mask selects strictly negative inputs only
    x = np.asarray(x, dtype=DTYPE)
    dout = np.asarray(dout, dtype=DTYPE)
    if x.shape != dout.shape:
        raise ValueError(f"upstream shape {dout.shape} does not match cache {x.shape}")
    return np.where(x < 0, dout * rule.backward_slope, dout)


class Activation(Op):
    name = "activation"

    def __init__(self, rule: ActivationRule | None = None):
        self.rule = rule or ActivationRule.relu()

    def _rule(self, ctx):
        return ctx.rule if ctx.rule is not None else self.rule

    def forward(self, ctx, x):
        ctx.saved["x"] = x
        return activation_forward(x, self._rule(ctx))

    def backward(self, ctx, grad):
        return (activation_backward(ctx.saved["x"], grad, self._rule(ctx)),)

    def __repr__(self):
        return f"Activation({self.rule})"


# --------------------------------------------------------------------------
# Convolution (cross-correlation, kernel not flipped)


@dataclass
class Conv2dSpec:
    kernel: np.ndarray  # (out_ch, in_ch, kH, kW)
    stride: int = 1
    padding: int | str = "valid"
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=DTYPE)
        if self.kernel.ndim != 4 or min(self.kernel.shape) <= 0:
            raise ValueError(f"kernel must be (out, in, kH, kW), got {self.kernel.shape}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def _resolve_padding(padding, kh, kw):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel extents")
        return (kh - 1) // 2, (kw - 1) // 2
    if isinstance(padding, (tuple, list)):
        return int(padding[0]), int(padding[1])
    return int(padding), int(padding)


def conv2d_forward(x, w, b=None, stride: int = 1, padding=0):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"input has {c} channels, kernel expects {ci}")
    ph, pw = _resolve_padding(padding, kh, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError("kernel larger than (padded) input")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col, column per output position: rows (C, kH, kW), columns (N, Ho, Wo)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    cache = (x.shape, xp.shape, cols, w, stride, (ph, pw), b is not None)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache):
    """Returns ``(dx, dw, db)``; ``db`` is None for a bias-free layer."""
    x_shape, xp_shape, cols, w, stride, (ph, pw), has_bias = cache
    o, c, kh, kw = w.shape
    n, _, ho, wo = dout.shape
    dout_t = dout.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (dout_t @ cols.T).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    # input gradient as (kH, kW, C, N, Ho, Wo) so each tap is one contiguous block
    taps = (w.transpose(2, 3, 1, 0).reshape(-1, o) @ dout_t).reshape(kh, kw, c, n, ho, wo)
    dxp = np.zeros((c, n, xp_shape[2], xp_shape[3]), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += taps[i, j]
    dx = dxp[:, :, ph:ph + x_shape[2], pw:pw + x_shape[3]].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw, db


def conv2d_forward_spec(x, spec: Conv2dSpec):
    return conv2d_forward(x, spec.kernel, spec.bias, spec.stride, spec.padding)


class Conv2d(Op):
    """Inputs ``(x, w)`` or ``(x, w, b)``."""

    name = "conv2d"

    def __init__(self, stride: int = 1, padding=0):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.stride = stride
        self.padding = padding

    def forward(self, ctx, x, w, b=None):
        out, ctx.saved["cache"] = conv2d_forward(x, w, b, self.stride, self.padding)
        return out

    def backward(self, ctx, grad):
        dx, dw, db = conv2d_backward(grad, ctx.saved["cache"])
        return (dx, dw) if db is None else (dx, dw, db)

    def __repr__(self):
        return f"Conv2d(stride={self.stride}, padding={self.padding!r})"


# --------------------------------------------------------------------------
# Batch normalization


@dataclass
class BatchNormSpec:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=DTYPE)
        self.beta = np.asarray(self.beta, dtype=DTYPE)
        if self.running_mean is None:
            self.running_mean = np.zeros_like(self.gamma)
        if self.running_var is None:
            self.running_var = np.ones_like(self.gamma)
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def identity(cls, channels: int, **kw) -> "BatchNormSpec":
        return cls(np.ones(channels), np.zeros(channels), **kw)


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ValueError(f"batchnorm expects (N, C) or (N, C, H, W), got {x.shape}")


def batchnorm_forward(x, gamma, beta, state: BatchNormSpec, training: bool):
    """Per-channel normalization; ``state`` supplies and receives running stats."""
    x = np.asarray(x, dtype=DTYPE)
    axes, bshape = _bn_axes(x)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in training mode needs batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // x.shape[1]
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = ((1 - state.momentum) * state.running_var
                             + state.momentum * var * m / max(m - 1, 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out, (xhat, inv_std, gamma, training, axes, bshape)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``.

    In training mode the mean and variance depend on the batch, so the input
    gradient carries the two centering terms; in inference mode it is a plain
    per-channel scaling.
    """
    xhat, inv_std, gamma, training, axes, bshape = cache
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma.reshape(bshape)
    if not training:
        return dxhat * inv_std.reshape(bshape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
    return dx, dgamma, dbeta


class BatchNorm(Op):
    """Inputs ``(x, gamma, beta)``; running statistics live on the op."""

    name = "batchnorm"

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.state = BatchNormSpec.identity(channels, momentum=momentum, eps=eps)

    def forward(self, ctx, x, gamma, beta):
        out, ctx.saved["cache"] = batchnorm_forward(x, gamma, beta, self.state, ctx.training)
        return out

    def backward(self, ctx, grad):
        return batchnorm_backward(grad, ctx.saved["cache"])

    def reset(self):
        self.state.running_mean = np.zeros_like(self.state.running_mean)
        self.state.running_var = np.ones_like(self.state.running_var)


# --------------------------------------------------------------------------
# Dense, pooling, loss


def dense_forward(x, w, b=None):
    x = np.asarray(x, dtype=DTYPE)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[0]:
        raise ValueError(f"dense expects {w.shape[0]} features, got {flat.shape[1]}")
    out = flat @ w
    if b is not None:
        out = out + b
    return out, (x.shape, flat, w, b is not None)


def dense_backward(dout, cache):
    x_shape, flat, w, has_bias = cache
    dx = (dout @ w.T).reshape(x_shape)
    dw = flat.T @ dout
    db = dout.sum(axis=0) if has_bias else None
    return dx, dw, db


class Dense(Op):
    """Inputs ``(x, w)`` or ``(x, w, b)`` with ``w`` of shape ``(in, out)``."""

    name = "dense"

    def forward(self, ctx, x, w, b=None):
        out, ctx.saved["cache"] = dense_forward(x, w, b)
        return out

    def backward(self, ctx, grad):
        dx, dw, db = dense_backward(grad, ctx.saved["cache"])
        return (dx, dw) if db is None else (dx, dw, db)


def maxpool2d_forward(x, kernel: int = 2, stride: int | None = None):
    stride = stride or kernel
    x = np.asarray(x, dtype=DTYPE)
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, kernel, stride)


def maxpool2d_backward(dout, cache):
    x_shape, arg, kernel, stride = cache
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=DTYPE)
    for i in range(kernel):
        for j in range(kernel):
            hit = arg == i * kernel + j
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dout * hit
    return dx


class MaxPool2d(Op):
    name = "maxpool2d"

    def __init__(self, kernel: int = 2, stride: int | None = None):
        self.kernel = kernel
        self.stride = stride or kernel

    def forward(self, ctx, x):
        out, ctx.saved["cache"] = maxpool2d_forward(x, self.kernel, self.stride)
        return out

    def backward(self, ctx, grad):
        return (maxpool2d_backward(grad, ctx.saved["cache"]),)


class GlobalAvgPool(Op):
    """(N, C, H, W) -> (N, C)."""

    name = "global_avg_pool"

    def forward(self, ctx, x):
        ctx.saved["shape"] = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, ctx, grad):
        n, c, h, w = ctx.saved["shape"]
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch, stabilized by log-sum-exp.

    Returns ``(loss, probs)``; ``probs`` doubles as the backward cache.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be integers in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    return float(loss), np.exp(log_probs)


class SoftmaxCrossEntropy(Op):
    """Inputs ``(logits, labels)``; scalar mean loss."""

    name = "softmax_cross_entropy"

    def forward(self, ctx, logits, labels):
        loss, probs = softmax_cross_entropy(logits, labels)
        ctx.saved["probs"] = probs
        ctx.saved["labels"] = np.atleast_1d(labels)
        return np.asarray(loss)

    def backward(self, ctx, grad):
        probs, labels = ctx.saved["probs"], ctx.saved["labels"]
        n = probs.shape[0]
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return d * (grad / n), None


# --------------------------------------------------------------------------
# Plumbing ops


class Sum(Op):
    name = "sum"

    def forward(self, ctx, x):
        ctx.saved["shape"] = np.shape(x)
        return np.asarray(np.sum(x))

    def backward(self, ctx, grad):
        return (np.full(ctx.saved["shape"], float(grad), dtype=DTYPE),)


class Add(Op):
    name = "add"

    def forward(self, ctx, a, b):
        if np.shape(a) != np.shape(b):
            raise ValueError(f"add shape mismatch: {np.shape(a)} vs {np.shape(b)}")
        return a + b

    def backward(self, ctx, grad):
        return grad, grad


class Scale(Op):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = float(factor)

    def forward(self, ctx, x):
        return x * self.factor

    def backward(self, ctx, grad):
        return (grad * self.factor,)


class Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, ctx, x):
        ctx.saved["shape"] = x.shape
        return x.reshape(self.shape)

    def backward(self, ctx, grad):
        return (grad.reshape(ctx.saved["shape"]),)


class Select(Op):
    """Picks one element of the flattened input (a class neuron, say)."""

    name = "select"

    def __init__(self, index: int):
        self.index = int(index)

    def forward(self, ctx, x):
        ctx.saved["shape"] = x.shape
        if not 0 <= self.index < x.size:
            raise ValueError(f"select index {self.index} out of range for size {x.size}")
        return np.asarray(x.reshape(-1)[self.index])

    def backward(self, ctx, grad):
        g = np.zeros(ctx.saved["shape"], dtype=DTYPE)
        g.reshape(-1)[self.index] = float(grad)
        return (g,)
