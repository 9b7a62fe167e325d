"""Small NCHW tensor engine with reverse-mode autodiff and Adam.

Only the ops the segmentation network needs are provided. Every op keeps the
floating dtype of its inputs, so the same graph can be evaluated in float64
for gradient checking while training runs in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeError

_FLOATS = (np.float32, np.float64)


class Tensor:
    """Array wrapper that records the ops applied to it.

    ``grad`` is only populated on tensors created with ``requires_grad=True``
    (leaves); intermediate gradients are discarded once propagated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor):
    # reverse post-order; iterative to survive deep graphs
    seen, post = set(), []
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return post[::-1]


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check4(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n, c, h, w), got shape {x.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def concat_channels(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check4(a, "concat input")
    _check4(b, "concat input")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: n/h/w mismatch {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _t(x)
    _check4(x, "slice input")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


def tensor_sum(x) -> Tensor:
    x = _t(x)
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


# ---------------------------------------------------------------- convolution


def _im2col_t(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Column matrix of shape (kh*kw*c, n*oh*ow); rows ordered (i, j, channel)."""
    n, c, h, w = xd.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xt = xd.transpose(1, 0, 2, 3)
    if kh == kw == 1 and stride == 1 and pad == 0:
        return xt.reshape(c, -1), oh, ow
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((kh, kw, c, n, oh, ow), dtype=xd.dtype)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i:i + hs:stride, j:j + ws:stride]
    return cols.reshape(kh * kw * c, -1), oh, ow


def _kernel_matrix(wd: np.ndarray) -> np.ndarray:
    co = wd.shape[0]
    return wd.transpose(0, 2, 3, 1).reshape(co, -1)


def _conv_data(xd: np.ndarray, wd: np.ndarray, stride: int, pad: int):
    """Returns output as (co, n, oh, ow) plus the column matrix."""
    cols, oh, ow = _im2col_t(xd, wd.shape[2], wd.shape[3], stride, pad)
    out = _kernel_matrix(wd) @ cols
    return out.reshape(wd.shape[0], xd.shape[0], oh, ow), cols


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    x, weight = _t(x), _t(weight)
    _check4(x, "conv2d input")
    _check4(weight, "conv2d weight")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    out, cols = _conv_data(x.data, weight.data, stride, pad)
    _, _, oh, ow = out.shape
    if bias is not None:
        out += bias.data.reshape(co, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = None
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        gb = gt.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and kh == kw and pad <= kh - 1:
                # full correlation with the flipped, transposed kernel
                wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gx, _ = _conv_data(g, wf, 1, kh - 1 - pad)
                gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
            else:
                dcols = (_kernel_matrix(weight.data).T @ gt).reshape(kh, kw, c, n, oh, ow)
                gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
                hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[i, j]
                gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward)


def maxpool2d(x, k: int, stride: int, pad: int = 0) -> Tensor:
    x = _t(x)
    _check4(x, "maxpool2d input")
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < k or wp < k:
        raise ShapeError(f"maxpool2d: window {k} larger than padded input {hp}x{wp}")
    oh, ow = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride].reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gxp[:, :, i:i + hs:stride, j:j + ws:stride] += np.where(arg == idx, g, 0)
        return (gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp,)

    return _result(np.ascontiguousarray(out), (x,), backward)


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even, odd = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (even + odd)
    gx[..., :-1] += 0.25 * even[..., 1:]
    gx[..., 0] += 0.25 * even[..., 0]
    gx[..., 1:] += 0.25 * odd[..., :-1]
    gx[..., -1] += 0.25 * odd[..., -1]
    return np.moveaxis(gx, -1, axis)


def upsample_bilinear2x(x) -> Tensor:
    """Exact 2x bilinear upsampling, half-pixel centers (align_corners off)."""
    x = _t(x)
    _check4(x, "upsample input")
    out = _up2_axis(_up2_axis(x.data, 2), 3).astype(x.dtype)
    return _result(np.ascontiguousarray(out), (x,),
                   lambda g: (_up2_axis_grad(_up2_axis_grad(g, 3), 2).astype(g.dtype),))


# ---------------------------------------------------------------- normalization


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the running statistics are updated in place
    (unbiased variance, as in the usual ResNet recipe).
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    _check4(x, "batchnorm2d input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have length {c}, got {gamma.shape}, {beta.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm2d: running stats must have length {c}")
    gb = gamma.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)
    if training:
        m = x.data.size // c
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.ravel() * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.ravel()
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv
    out = (xhat * gb + beta.data.reshape(1, c, 1, 1)).astype(x.dtype)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gb
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = dxhat * inv
            gx = gx.astype(g.dtype)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- loss


def softmax_cross_entropy(logits, target, ignore_label: Optional[int] = None) -> Tensor:
    """Mean pixelwise cross-entropy of 2-class logits against integer targets."""
    logits = _t(logits)
    _check4(logits, "logits")
    n, c, h, w = logits.shape
    if c != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2 logit channels, got {c}")
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {(n, h, w)}")
    valid = np.ones(target.shape, dtype=bool) if ignore_label is None else target != ignore_label
    tv = target[valid]
    if tv.size and not np.isin(tv, (0, 1)).all():
        bad = tv[~np.isin(tv, (0, 1))][0]
        raise ShapeError(f"target value {bad!r} outside {{0, 1}}" +
                         ("" if ignore_label is None else f" and ignore label {ignore_label}"))
    count = int(valid.sum())
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - lse
    tgt = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(logp, tgt[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count if count else 0.0

    def backward(g):
        if not count:
            return (np.zeros_like(z),)
        p = np.exp(logp)
        onehot = np.stack([tgt == 0, tgt == 1], axis=1)
        gz = (p - onehot) * valid[:, None] * (g / count)
        return (gz.astype(z.dtype),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place.

    Parameters missing from ``grads`` (or with a None gradient) are left
    untouched and keep their moments. Returns ``(params, state)``.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if g is not None and name in params and np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** t)
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (step_size * m / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params, state
