"""Reverse-mode autodiff on numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them.  ``Tensor.backward``
walks the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if id(p) not in seen)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node is not self:
                    # intermediate gradients are not kept once propagated
                    node.grad = None

    def __add__(self, other):
        return add(self, other)


def _result(data, parents, backward):
    out = Tensor(data, _parents=tuple(parents))
    if out.requires_grad:
        out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)
    return _result(a.data + b.data, (a, b), backward)


def _check4(x, op):
    if x.data.ndim != 4:
        raise ValueError(f"{op} expects an (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution

def conv_output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation, ``x`` as (N, C, H, W), ``weight`` as (O, C, k, k)."""
    _check4(x, "conv2d")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be (O, C, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit a padded {h}x{w} input")
    wmat = weight.data.reshape(o, c * kh * kw)

    if kh == kw == 1 and stride == 1 and pad == 0:
        xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
        cols = xm
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            weight._accumulate((gm.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=0))
        if not x.requires_grad:
            return
        gcols = gm @ wmat
        if kh == kw == 1 and stride == 1 and pad == 0:
            x._accumulate(gcols.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            return
        gcols = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i: i + stride * ho: stride, j: j + stride * wo: stride] += gcols[:, :, i, j]
        x._accumulate(gxp[:, :, pad: pad + h, pad: pad + w])

    return _result(np.ascontiguousarray(out), (x, weight) + ((bias,) if bias is not None else ()),
                   backward)


# ---------------------------------------------------------------------------
# normalisation and activations

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                training: bool, momentum=0.9, eps=1e-5) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running
    estimates (numpy arrays, updated in place) move towards them as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    _check4(x, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    shape = (1, c, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm2d: training mode needs a batch of at least 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gx = g * gamma.data.reshape(shape)
        if training:
            m = x.data.size // c
            gx = (gx - gx.sum(axis=(0, 2, 3), keepdims=True) / m
                  - xhat * (gx * xhat).sum(axis=(0, 2, 3), keepdims=True) / m)
        x._accumulate(gx * inv.reshape(shape))

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


# ---------------------------------------------------------------------------
# pooling and resampling

def _pool_windows(data, k, stride, pad, fill):
    n, c, h, w = data.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"pool: {k}x{k} window does not fit a padded {h}x{w} input")
    xp = np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill) if pad else data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride], ho, wo


def maxpool2d(x: Tensor, k=3, stride=2, pad=1) -> Tensor:
    """Max pooling; gradient goes to the first maximal element in row-major order."""
    _check4(x, "maxpool2d")
    n, c, h, w = x.shape
    win, ho, wo = _pool_windows(x.data, k, stride, pad, -np.inf)
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gxp[:, :, i: i + stride * ho: stride, j: j + stride * wo: stride] += g * (arg == idx)
        x._accumulate(gxp[:, :, pad: pad + h, pad: pad + w])

    return _result(out, (x,), backward)


def avgpool2d(x: Tensor, k=3, stride=1, pad=1) -> Tensor:
    """Average pooling; padded cells are excluded from each window's count."""
    _check4(x, "avgpool2d")
    n, c, h, w = x.shape
    win, ho, wo = _pool_windows(x.data, k, stride, pad, 0.0)
    ones, _, _ = _pool_windows(np.ones((1, 1, h, w), dtype=x.data.dtype), k, stride, pad, 0.0)
    count = ones.sum(axis=(-1, -2))
    out = win.sum(axis=(-1, -2)) / count

    def backward(g):
        gs = g / count
        gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i: i + stride * ho: stride, j: j + stride * wo: stride] += gs
        x._accumulate(gxp[:, :, pad: pad + h, pad: pad + w])

    return _result(out.astype(x.data.dtype, copy=False), (x,), backward)


def upsample_nearest(x: Tensor, factor=2) -> Tensor:
    _check4(x, "upsample_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _result(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training.  The mask comes from ``rng``."""
    if not training or p == 0:
        return x
    if not 0 <= p < 1:
        raise ValueError("dropout probability must lie in [0, 1)")
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit random generator")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1 - p)
    return _result(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


def concat_channels(xs) -> Tensor:
    xs = list(xs)
    for t in xs:
        _check4(t, "concat_channels")
    base = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ValueError(f"concat_channels: {t.shape} incompatible with {base}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def backward(g):
        for t, part in zip(xs, np.split(g, splits, axis=1)):
            t._accumulate(part)

    return _result(np.concatenate([t.data for t in xs], axis=1), xs, backward)


# ---------------------------------------------------------------------------
# loss

def mae_loss(pred: Tensor, truth) -> Tensor:
    """Mean absolute error; the subgradient at zero residual is zero."""
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if pred.shape != t.shape:
        raise ValueError(f"mae_loss: shape mismatch {pred.shape} vs {t.shape}")
    r = pred.data - t
    n = r.size
    loss = np.abs(r).sum() / n
    sign = np.sign(r)

    def backward(g):
        pred._accumulate(g * sign / n)

    return _result(np.asarray(loss, dtype=pred.data.dtype), (pred,), backward)
