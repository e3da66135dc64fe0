"""Layer kernels with explicit backward passes, initializers and Adam.

Every kernel is a pure function.  Forward functions return ``(out, cache)``;
the matching ``*_backward`` takes the upstream gradient and the cache and
returns gradients for each differentiable input.  Convolutions are fixed to
kernel 4, stride 2, padding 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DegenerateBatchError, DimensionError, OptimizerError

KERNEL = 4
STRIDE = 2
PADDING = 1
LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    transposed: bool = False
    kernel: int = KERNEL
    stride: int = STRIDE
    padding: int = PADDING

    def __post_init__(self):
        if (self.kernel, self.stride, self.padding) != (KERNEL, STRIDE, PADDING):
            raise DimensionError("only kernel=4, stride=2, padding=1 is supported")

    @property
    def weight_shape(self):
        if self.transposed:
            return (self.in_channels, self.out_channels, KERNEL, KERNEL)
        return (self.out_channels, self.in_channels, KERNEL, KERNEL)

    @property
    def fan_in(self):
        # a transposed 4/2/1 conv feeds each output pixel from a 2x2 input window
        if self.transposed:
            return self.in_channels * (KERNEL // STRIDE) ** 2
        return self.in_channels * KERNEL * KERNEL


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


def _windows(xp, ho, wo):
    """Strided view of the 4x4 stride-2 windows: (N, C, ho, wo, 4, 4)."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, KERNEL, KERNEL),
        strides=(s0, s1, STRIDE * s2, STRIDE * s3, s2, s3),
        writeable=False,
    )


def _im2col(x, ho, wo):
    xp = np.pad(x, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
    win = _windows(xp, ho, wo)
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * KERNEL * KERNEL)


def _col2im(cols, n, c, ho, wo, h, w):
    """Scatter-add (n, ho, wo, c, 4, 4) patches into an (n, c, h, w) map."""
    cols = cols.reshape(n, ho, wo, c, KERNEL, KERNEL).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, c, h + 2 * PADDING, w + 2 * PADDING), dtype=cols.dtype)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            out[:, :, ki:ki + STRIDE * ho:STRIDE, kj:kj + STRIDE * wo:STRIDE] += cols[..., ki, kj]
    return out[:, :, PADDING:PADDING + h, PADDING:PADDING + w]


def conv_down(x, w, b=None):
    """Strided 4x4 convolution, halving the spatial extent.

    ``w`` has shape (Cout, Cin, 4, 4); ``b`` is (Cout,) or None.
    """
    _check_4d(x)
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL):
        raise DimensionError(f"weight must be Cout x Cin x 4 x 4, got {w.shape}")
    if w.shape[1] != c:
        raise DimensionError(f"channel axis mismatch: input has {c}, weight expects {w.shape[1]}")
    if h % 2 or h < 4:
        raise DimensionError(f"height axis must be even and >= 4, got {h}")
    if wd % 2 or wd < 4:
        raise DimensionError(f"width axis must be even and >= 4, got {wd}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
    ho, wo = h // 2, wd // 2
    cols = _im2col(x, ho, wo)
    out = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, w, b is not None)


def conv_down_backward(dout, cache):
    cols, xshape, w, has_bias = cache
    n, c, h, wd = xshape
    cout, ho, wo = dout.shape[1:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0) if has_bias else None
    dcols = d2 @ w.reshape(cout, -1)
    dx = _col2im(dcols, n, c, ho, wo, h, wd)
    return np.ascontiguousarray(dx), dw, db


def conv_up(x, w, b=None):
    """Transposed 4x4 stride-2 convolution, doubling the spatial extent.

    ``w`` has shape (Cin, Cout, 4, 4).  With zero bias this is the adjoint of
    :func:`conv_down` sharing the same weight array.
    """
    _check_4d(x)
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL):
        raise DimensionError(f"weight must be Cin x Cout x 4 x 4, got {w.shape}")
    if w.shape[0] != c:
        raise DimensionError(f"channel axis mismatch: input has {c}, weight expects {w.shape[0]}")
    cout = w.shape[1]
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {b.shape}")
    x2 = x.transpose(0, 2, 3, 1).reshape(-1, c)
    cols = x2 @ w.reshape(c, -1)
    out = _col2im(cols, n, cout, h, wd, 2 * h, 2 * wd)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (x2, x.shape, w, b is not None)


def conv_up_backward(dout, cache):
    x2, xshape, w, has_bias = cache
    n, c, h, wd = xshape
    dcols = _im2col(dout, h, wd)
    dw = (x2.T @ dcols).reshape(w.shape)
    dx = (dcols @ w.reshape(c, -1).T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def batch_norm(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over (N, H, W) or (N,) axes.

    Returns ``(out, cache, new_running_mean, new_running_var)``.  Running
    statistics are never modified in place; in eval mode they are returned
    unchanged.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if train:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batch norm in train mode needs batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // x.shape[1]
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * var * (m / (m - 1))
        new_mean = new_mean.astype(running_mean.dtype)
        new_var = new_var.astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, axes, shape, train), new_mean, new_var


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, axes, shape, train = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if train:
        m = dout.size // dout.shape[1]
        dx = (inv_std.reshape(shape) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes).reshape(shape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
        )
    else:
        dx = dxhat * inv_std.reshape(shape)
    return dx, dgamma, dbeta


def leaky_relu(x, slope=LEAKY_SLOPE):
    mask = x >= 0
    return np.where(mask, x, slope * x), (mask, slope)


def leaky_relu_backward(dout, cache):
    mask, slope = cache
    return np.where(mask, dout, slope * dout)


def linear(x, w, b=None):
    """Affine map ``x @ w + b`` with ``w`` stored as (Din, Dout)."""
    if x.ndim != 2:
        raise DimensionError(f"linear input must be rank 2, got shape {x.shape}")
    if w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"feature axis mismatch: input has {x.shape[1]}, weight is {w.shape}")
    out = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias must have shape ({w.shape[1]},), got {b.shape}")
        out += b
    return out, (x, w, b is not None)


def linear_backward(dout, cache):
    x, w, has_bias = cache
    return dout @ w.T, x.T @ dout, (dout.sum(axis=0) if has_bias else None)


def sigmoid(x):
    """Overflow-free logistic function.

    Results are kept strictly inside (0, 1): saturated values are pinned to the
    nearest representable neighbours of 0 and 1.
    """
    x = np.asarray(x)
    dt = np.result_type(x.dtype, np.float32)
    x = x.astype(dt, copy=False)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dt, copy=False)
    return np.clip(out, np.finfo(dt).smallest_subnormal, np.nextafter(dt.type(1), dt.type(0)))


def log_sigmoid(x):
    return -(np.maximum(-x, 0) + np.log1p(np.exp(-np.abs(x))))


def bce_with_logits(logits, target):
    """Elementwise cross entropy between ``sigmoid(logits)`` and soft targets."""
    return np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))


def bce_with_logits_grad(logits, target):
    return sigmoid(logits) - target


def avg_pool(x, factor=2):
    """Non-overlapping ``factor`` x ``factor`` mean pooling."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"spatial extent {h}x{w} not divisible by pooling factor {factor}")
    out = x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return out, (x.shape, factor)


def avg_pool_backward(dout, cache):
    shape, f = cache
    dx = np.repeat(np.repeat(dout, f, axis=2), f, axis=3) / (f * f)
    return dx.astype(dout.dtype, copy=False).reshape(shape)


def he_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam update of every parameter named in ``grads``.

    Parameters and moment buffers are updated in place; both are returned for
    convenience.  All gradients are validated before anything is modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(name)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state
