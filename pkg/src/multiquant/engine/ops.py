"""Differentiable ops. Each returns a new :class:`Tensor` whose backward closure
maps the output gradient to one gradient per parent (``None`` to skip)."""

from __future__ import annotations

import contextlib
from typing import Optional, Union

import numpy as np

from . import probe
from .tensor import ShapeError, Tensor

# Operand dtype for the conv/linear matmuls. float64 by default; float32 roughly
# halves training time at the cost of ~1e-7 relative rounding in those products.
_MATMUL_DTYPE = np.float64


@contextlib.contextmanager
def matmul_precision(dtype):
    global _MATMUL_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"matmul precision must be float32 or float64, got {dtype}")
    prev = _MATMUL_DTYPE
    _MATMUL_DTYPE = dtype
    try:
        yield
    finally:
        _MATMUL_DTYPE = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError("elementwise-add", f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), "elementwise-add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError("elementwise-mul", f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), "elementwise-mul", backward)


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor.from_op(x.data * c, (x,), "scale", lambda g: (g * c,), factor=c)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    return Tensor.from_op(np.asarray(x.data.sum()), (x,), "reduce-sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from exc
    return Tensor.from_op(out, (x,), "reshape", lambda g: (g.reshape(x.shape),), shape=shape)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError("channel-slice", f"channels [{start}, {stop}) out of range for {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor.from_op(x.data[:, start:stop], (x,), "channel-slice", backward, start=start, stop=stop)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    p = probe.active()
    if p is not None:
        p.note(mask)
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", f"input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear", f"bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, weight.shape[0])
        gw = g2.T @ x.data.reshape(-1, weight.shape[1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, "linear", backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via explicit im2col and one matmul."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError("conv2d", f"input has {c} channels but weight expects {cw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", f"bias {bias.shape} does not match {o} output channels")
    s, pad = stride, padding
    oh = (h + 2 * pad - kh) // s + 1
    ow = (w + 2 * pad - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    # im2col over an NHWC copy: column order is (kh, kw, c)
    dt = _MATMUL_DTYPE
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dt)
    xp[:, pad : pad + h, pad : pad + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + s * oh : s, j : j + s * ow : s, :]
    cols = cols.reshape(n * oh * ow, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1).astype(dt)
    out = (cols @ wmat.T).astype(np.float64, copy=False)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gb = g2.sum(axis=0) if bias is not None else None
        g2 = g2.astype(dt, copy=False)
        gw = (g2.T @ cols).astype(np.float64, copy=False).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, oh, ow, kh, kw, c)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + s * oh : s, j : j + s * ow : s, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2).astype(np.float64)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, "conv2d", backward, stride=s, padding=pad)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("maxpool2d", f"spatial size {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    p = probe.active()
    if p is not None:
        p.note(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // k, w // k, k * k))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor.from_op(out, (x,), "maxpool2d", backward, kernel=k)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch norm over (N, H, W) per channel. Running stats are updated in place in training mode."""
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batchnorm2d", f"input {x.shape} vs affine params {gamma.shape}/{beta.shape}")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if training:
        m = x.data.size // x.shape[1]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))

        def backward(g):
            dxhat = g * g_
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            return g * g_ * inv_std[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * g_ + b_
    return Tensor.from_op(out, (x, gamma, beta), "batchnorm2d", backward, training=training, momentum=momentum, eps=eps)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _targets(target: Union[np.ndarray, Tensor], n: int, c: int) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim == 1 and t.shape[0] == n and np.issubdtype(t.dtype, np.integer):
        if t.min() < 0 or t.max() >= c:
            raise ShapeError("softmax-cross-entropy", f"label out of range for {c} classes")
        onehot = np.zeros((n, c))
        onehot[np.arange(n), t] = 1.0
        return onehot
    t = np.asarray(t, dtype=np.float64).reshape(n, -1)
    if t.shape[1] != c:
        raise ShapeError("softmax-cross-entropy", f"target width {t.shape[1]} does not match {c} classes")
    return t


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross entropy. ``target`` is integer labels (N,) or one-hot rows (N, C)."""
    z = logits.data.reshape(1, -1) if logits.data.ndim == 1 else logits.data
    n, c = z.shape
    y = _targets(target, n, c)
    logp = _log_softmax(z)
    loss = -(y * logp).sum() / n

    def backward(g):
        return ((np.exp(logp) * y.sum(axis=1, keepdims=True) - y) * (g / n)).reshape(logits.shape), None

    return Tensor.from_op(np.asarray(loss), (logits,), "softmax-cross-entropy", backward)


def soft_cross_entropy(student: Tensor, teacher: Tensor) -> Tensor:
    """Mean of ``-sum_c softmax(teacher)_c * log_softmax(student)_c`` over the batch.

    Differentiable in both arguments; callers that want a fixed teacher pass a
    detached tensor.
    """
    if student.shape != teacher.shape:
        raise ShapeError("soft-cross-entropy", f"student {student.shape} vs teacher {teacher.shape}")
    s = student.data.reshape(1, -1) if student.data.ndim == 1 else student.data
    t = teacher.data.reshape(s.shape)
    n = s.shape[0]
    ls = _log_softmax(s)
    lt = _log_softmax(t)
    pt = np.exp(lt)
    loss = -(pt * ls).sum() / n

    def backward(g):
        gs = (np.exp(ls) - pt) * (g / n)
        inner = (pt * ls).sum(axis=1, keepdims=True)
        gt = -pt * (ls - inner) * (g / n)
        return gs.reshape(student.shape), gt.reshape(teacher.shape)

    return Tensor.from_op(np.asarray(loss), (student, teacher), "soft-cross-entropy", backward)
