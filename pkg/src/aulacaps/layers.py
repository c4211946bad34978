"""Convolution, pooling, normalisation and block layers on top of the tape engine.

Convolutions are channel-first (NCHW / NCTHW) cross-correlations computed as a
batched matmul of the flattened kernel against im2col columns.
The input gradient of a convolution is a transposed convolution and vice
versa, so both directions share the same three kernels below.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, record


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


# --- raw kernels (numpy in, numpy out) ---------------------------------------


def _im2col(xpad: np.ndarray, ksize, stride, out_sp) -> np.ndarray:
    """Columns (N, K*C, prod(out_sp)) with kernel offset major, channel minor."""
    n, c = xpad.shape[:2]
    k_total = int(np.prod(ksize))
    cols = np.empty((n, k_total, c) + tuple(out_sp), dtype=xpad.dtype)
    for idx, offset in enumerate(itertools.product(*(range(k) for k in ksize))):
        sl = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, out_sp))
        cols[:, idx] = xpad[(slice(None), slice(None)) + sl]
    return cols.reshape(n, k_total * c, -1)


def _pad_input(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def _flat_kernel(w: np.ndarray) -> np.ndarray:
    """(F, C, *k) -> (F, K*C) matching :func:`_im2col` row order."""
    d = w.ndim - 2
    return np.moveaxis(w, 1, -1).reshape(w.shape[0], -1) if d else w


def conv_forward(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    ksize = w.shape[2:]
    xpad = _pad_input(x, padding)
    out_sp = tuple((i - k) // s + 1 for i, k, s in zip(xpad.shape[2:], ksize, stride))
    cols = _im2col(xpad, ksize, stride, out_sp)
    out = np.matmul(_flat_kernel(w), cols)  # (N, F, O)
    return out.reshape((x.shape[0], w.shape[0]) + out_sp)


def conv_input_grad(g: np.ndarray, w: np.ndarray, stride, padding, in_spatial) -> np.ndarray:
    """Adjoint of :func:`conv_forward` with respect to its input.

    ``g`` is (N, F, *O); returns (N, C, *in_spatial).
    """
    d = w.ndim - 2
    ksize = w.shape[2:]
    n, f = g.shape[:2]
    out_sp = g.shape[2:]
    dil_shape = tuple((o - 1) * s + 1 for o, s in zip(out_sp, stride))
    if any(s > 1 for s in stride):
        gd = np.zeros((n, f) + dil_shape, dtype=g.dtype)
        gd[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)] = g
    else:
        gd = g
    gd = np.pad(gd, [(0, 0), (0, 0)] + [(k - 1, k - 1) for k in ksize])
    w_flip = w[(slice(None), slice(None)) + (slice(None, None, -1),) * d]
    w_t = np.swapaxes(w_flip, 0, 1)  # (C, F, *k)
    full = conv_forward(gd, w_t, (1,) * d, (0,) * d)  # (N, C, *((O-1)s + k))
    padded_sp = tuple(i + 2 * p for i, p in zip(in_spatial, padding))
    tail = [(0, 0), (0, 0)] + [(0, ps - fs) for ps, fs in zip(padded_sp, full.shape[2:])]
    if any(t[1] for t in tail):
        full = np.pad(full, tail)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + i) for p, i in zip(padding, in_spatial))
    return full[crop]


def conv_weight_grad(x: np.ndarray, g: np.ndarray, ksize, stride, padding) -> np.ndarray:
    """Gradient of :func:`conv_forward` with respect to the kernel: (F, C, *k)."""
    xpad = _pad_input(x, padding)
    out_sp = g.shape[2:]
    cols = _im2col(xpad, ksize, stride, out_sp)  # (N, K*C, O)
    gf = g.reshape(g.shape[0], g.shape[1], -1)  # (N, F, O)
    gw = np.einsum("nfo,nro->fr", gf, cols, optimize=True)
    f, c = g.shape[1], x.shape[1]
    return np.moveaxis(gw.reshape((f,) + tuple(ksize) + (c,)), -1, 1)


def conv_output_size(in_size: int, k: int, stride: int, pad: int) -> int:
    return (in_size + 2 * pad - k) // stride + 1


def transposed_output_size(in_size: int, k: int, stride: int, pad: int, output_padding: int = 0) -> int:
    return (in_size - 1) * stride - 2 * pad + k + output_padding


# --- differentiable ops ------------------------------------------------------


def conv(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation; ``weight`` is (out_ch, in_ch, *k)."""
    weight = ad.as_tensor(weight)
    d = weight.ndim - 2
    stride = _tuple(stride, d)
    padding = _tuple(padding, d)
    kind = f"conv{d}d"

    def fwd(xd, wd, *bd):
        if xd.ndim != d + 2 or xd.shape[1] != wd.shape[1]:
            raise ShapeError(kind, xd.shape, wd.shape)
        for i, k, p in zip(xd.shape[2:], wd.shape[2:], padding):
            if k > i + 2 * p:
                raise ShapeError(kind, xd.shape, wd.shape)
        out = conv_forward(xd, wd, stride, padding)
        if bd:
            if bd[0].shape != (wd.shape[0],):
                raise ShapeError(kind, wd.shape, bd[0].shape)
            out = out + bd[0].reshape((1, -1) + (1,) * d)

        def bwd(g):
            gx = conv_input_grad(g, wd, stride, padding, xd.shape[2:]) if need_x else None
            gw = conv_weight_grad(xd, g, wd.shape[2:], stride, padding) if need_w else None
            if bd:
                return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + d)))
            return gx, gw

        return out, bwd

    x = ad.as_tensor(x)
    need_x, need_w = x.requires_grad, weight.requires_grad
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(kind, inputs, fwd)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    if ad.as_tensor(weight).ndim != 4:
        raise ShapeError("conv2d", ad.as_tensor(weight).shape)
    return conv(x, weight, bias, stride, padding)


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    if ad.as_tensor(weight).ndim != 5:
        raise ShapeError("conv3d", ad.as_tensor(weight).shape)
    return conv(x, weight, bias, stride, padding)


def conv_transpose(x, weight, bias=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """Transposed convolution; ``weight`` is (in_ch, out_ch, *k).

    Output extent per axis is ``(in - 1) * stride - 2 * pad + k + output_padding``.
    """
    weight = ad.as_tensor(weight)
    d = weight.ndim - 2
    stride = _tuple(stride, d)
    padding = _tuple(padding, d)
    output_padding = _tuple(output_padding, d)
    kind = f"conv_transpose{d}d"

    def fwd(xd, wd, *bd):
        if xd.ndim != d + 2 or xd.shape[1] != wd.shape[0]:
            raise ShapeError(kind, xd.shape, wd.shape)
        out_sp = tuple(
            transposed_output_size(i, k, s, p, op)
            for i, k, s, p, op in zip(xd.shape[2:], wd.shape[2:], stride, padding, output_padding)
        )
        if any(o < 1 for o in out_sp) or any(op >= s for op, s in zip(output_padding, stride)):
            raise ShapeError(kind, xd.shape, wd.shape)
        out = conv_input_grad(xd, wd, stride, padding, out_sp)
        if bd:
            if bd[0].shape != (wd.shape[1],):
                raise ShapeError(kind, wd.shape, bd[0].shape)
            out = out + bd[0].reshape((1, -1) + (1,) * d)

        def bwd(g):
            gx = conv_forward(g, wd, stride, padding) if need_x else None
            gw = conv_weight_grad(g, xd, wd.shape[2:], stride, padding) if need_w else None
            if bd:
                return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + d)))
            return gx, gw

        return out, bwd

    x = ad.as_tensor(x)
    need_x, need_w = x.requires_grad, weight.requires_grad
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(kind, inputs, fwd)


def transposed_conv2d(x, weight, bias=None, stride=2, padding=2, output_padding=1) -> Tensor:
    return conv_transpose(x, weight, bias, stride, padding, output_padding)


def maxpool(x, window) -> Tensor:
    """Non-overlapping max pooling over all spatial axes (stride == window).

    Trailing remainders are dropped. Ties route the gradient to the first maximum.
    """
    x = ad.as_tensor(x)
    d = x.ndim - 2
    window = _tuple(window, d)

    def fwd(xd):
        sp = xd.shape[2:]
        if any(w > s for w, s in zip(window, sp)):
            raise ShapeError("maxpool", xd.shape, window)
        out_sp = tuple(s // w for s, w in zip(sp, window))
        crop = xd[(slice(None), slice(None)) + tuple(slice(0, o * w) for o, w in zip(out_sp, window))]
        n, c = xd.shape[:2]
        split = [n, c]
        for o, w in zip(out_sp, window):
            split += [o, w]
        blocks = crop.reshape(split)
        perm = [0, 1] + [2 + 2 * i for i in range(d)] + [3 + 2 * i for i in range(d)]
        blocks = blocks.transpose(perm).reshape((n, c) + out_sp + (-1,))
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def bwd(g):
            gb = np.zeros(blocks.shape, dtype=g.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            gb = gb.reshape((n, c) + out_sp + window)
            inv = np.argsort(perm)
            gb = gb.transpose(inv).reshape(crop.shape)
            full = np.zeros_like(xd)
            full[(slice(None), slice(None)) + tuple(slice(0, o * w) for o, w in zip(out_sp, window))] = gb
            return (full,)

        return out, bwd

    return record(f"maxpool{d}d", (x,), fwd)


def batchnorm_train(x, gamma, beta, eps: float):
    """Batch-statistics normalisation; returns (output, batch_mean, batch_var)."""
    x = ad.as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    stats = {}

    def fwd(xd, gd, bd):
        m = xd.size // xd.shape[1]
        if m == 0:
            raise ValueError("batchnorm: empty batch")
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gd.reshape(shape) + bd.reshape(shape)
        stats["mean"] = mu.reshape(-1)
        stats["var"] = var.reshape(-1)

        def bwd(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gxhat = g * gd.reshape(shape)
            gx = inv / m * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx.astype(xd.dtype, copy=False), gg, gb

        return out.astype(xd.dtype, copy=False), bwd

    out = record("batchnorm", (x, gamma, beta), fwd)
    return out, stats["mean"], stats["var"]


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps: float) -> Tensor:
    x = ad.as_tensor(x)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    scale = ad.as_tensor(gamma) * Tensor(
        (1.0 / np.sqrt(running_var + eps)).astype(ad.as_tensor(gamma).dtype)
    )
    shift = ad.as_tensor(beta) - scale * Tensor(running_mean.astype(ad.as_tensor(gamma).dtype))
    return x * scale.reshape(shape) + shift.reshape(shape)


def activation(x, kind: str = "leaky_relu", alpha: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return ad.leaky_relu(x, alpha)
    if kind == "relu":
        return ad.relu(x)
    if kind == "tanh":
        return ad.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# --- parameterised modules ---------------------------------------------------


class Module:
    """Minimal parameter container: attributes that are Tensors with
    ``requires_grad`` are parameters, Modules are children, and
    ``_buffers`` lists non-learnable arrays that belong in checkpoints."""

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def buffer_owners(self, prefix: str = ""):
        """Yield ``(name, (module, attribute))`` for every buffer in the tree."""
        for key in self._buffers:
            yield prefix + key, (self, key)
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.buffer_owners(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.buffer_owners(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, (owner, attr) in self.buffer_owners(prefix):
            yield name, getattr(owner, attr)

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype):
        """Cast parameters and buffers in place."""
        for m in self.modules():
            for key, val in list(vars(m).items()):
                if isinstance(val, Tensor):
                    val.data = val.data.astype(dtype)
                    val.grad = None
            for key in m._buffers:
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * (gain * np.sqrt(2.0 / fan_in))).astype(ad.DEFAULT_DTYPE)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=ad.DEFAULT_DTYPE)


class Conv(Module):
    """Convolution layer (2D or 3D depending on ``kernel`` length)."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding="same", gain=1.0):
        super().__init__()
        kernel = tuple(kernel)
        d = len(kernel)
        self.stride = _tuple(stride, d)
        if padding == "same":
            padding = tuple(k // 2 for k in kernel)
        self.padding = _tuple(padding, d)
        fan_in = in_ch * int(np.prod(kernel))
        self.weight = parameter(he_normal(rng, (out_ch, in_ch) + kernel, fan_in, gain))
        self.bias = parameter(np.zeros(out_ch))

    def forward(self, x):
        return conv(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Transposed conv whose 'same'-style padding multiplies the extent by the stride."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=2):
        super().__init__()
        self.stride = (stride, stride)
        self.padding = (kernel // 2, kernel // 2)
        # (in-1)s - 2(k//2) + k + op == in*s for odd k needs op = s - 1
        self.output_padding = (stride - 1, stride - 1)
        fan_in = in_ch * kernel * kernel
        self.weight = parameter(he_normal(rng, (in_ch, out_ch, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros(out_ch))

    def forward(self, x):
        return conv_transpose(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.weight = parameter(he_normal(rng, (in_features, out_features), in_features))
        self.bias = parameter(np.zeros(out_features))

    def forward(self, x):
        return ad.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    """Per-channel batch normalisation with running statistics."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=ad.DEFAULT_DTYPE)
        self.running_var = np.ones(channels, dtype=ad.DEFAULT_DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.track_stats = True

    def forward(self, x):
        if self.training:
            out, mu, var = batchnorm_train(x, self.gamma, self.beta, self.eps)
            if self.track_stats:
                m = self.momentum
                dt = self.running_mean.dtype
                self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(dt)
                self.running_var = (m * self.running_var + (1 - m) * var).astype(dt)
            return out
        return batchnorm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)


@dataclass
class BatchNormState:
    """Snapshot view of a BatchNorm layer's state."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float
    epsilon: float
    training_mode: bool

    @classmethod
    def of(cls, bn: BatchNorm) -> "BatchNormState":
        return cls(bn.gamma.data.copy(), bn.beta.data.copy(), bn.running_mean.copy(),
                   bn.running_var.copy(), bn.momentum, bn.eps, bn.training)


class ConvBNAct(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, alpha=0.2, act=True):
        super().__init__()
        self.conv = Conv(in_ch, out_ch, kernel, rng)
        self.bn = BatchNorm(out_ch)
        self.alpha = alpha
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ad.leaky_relu(y, self.alpha) if self.act else y


class ResidualBlock2d(Module):
    """Two 3x3 conv-BN stages plus a shortcut, LeakyReLU after the sum.

    The shortcut is the identity when channel counts match, else a 1x1 projection.
    """

    def __init__(self, in_ch, out_ch, rng, kernel=3, alpha=0.2):
        super().__init__()
        self.body1 = ConvBNAct(in_ch, out_ch, (kernel, kernel), rng, alpha)
        self.body2 = ConvBNAct(out_ch, out_ch, (kernel, kernel), rng, alpha, act=False)
        self.proj = Conv(in_ch, out_ch, (1, 1), rng) if in_ch != out_ch else None
        self.alpha = alpha

    def forward(self, x):
        shortcut = x if self.proj is None else self.proj(x)
        return ad.leaky_relu(self.body2(self.body1(x)) + shortcut, self.alpha)


class ConvBlock3d(Module):
    """Two conv3d-BN-LeakyReLU stages."""

    def __init__(self, in_ch, out_ch, rng, kernel=5, alpha=0.2):
        super().__init__()
        k = (kernel,) * 3
        self.body1 = ConvBNAct(in_ch, out_ch, k, rng, alpha)
        self.body2 = ConvBNAct(out_ch, out_ch, k, rng, alpha)

    def forward(self, x):
        return self.body2(self.body1(x))


def residual_block_2d(x, block: ResidualBlock2d) -> Tensor:
    return block(x)
