"""Differentiable primitives.

Each function computes its forward result with numpy and hands a
vector-Jacobian closure to :func:`hemisit.tensor.emit`.  Only the
primitives the SIT model needs are provided; broadcasting is limited to
what numpy gives for elementwise binary ops.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import DimensionError, InputError
from .tensor import Tensor, emit

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    return emit("mul", A * B, (a, b),
                lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return emit("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul: {A.shape} @ {B.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return emit("matmul", A @ B, (a, b), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs, axis=0) -> Tensor:
    xs = tuple(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return emit("concat", np.concatenate([t.data for t in xs], axis=axis), xs,
                lambda g: tuple(np.split(g, sizes, axis=axis)))


def rows(x: Tensor, lo, hi) -> Tensor:
    """Slice ``lo:hi`` of the leading axis."""
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[lo:hi] = g
        return (full,)

    return emit("rows", x.data[lo:hi].copy(), (x,), vjp)


def flip(x: Tensor, axis) -> Tensor:
    return emit("flip", np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return emit("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,), vjp)


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return emit("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


# ---------------------------------------------------------------------------
# activations and pooling
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis=-1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise InputError(f"softmax axis {axis} invalid for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return emit("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def gap(x: Tensor) -> Tensor:
    """Global average over the three spatial axes of ``[M, C, H, W, D]``."""
    M, C = x.shape[:2]
    S = int(np.prod(x.shape[2:]))
    shape = x.shape
    return emit("gap", x.data.reshape(M, C, S).mean(axis=-1), (x,),
                lambda g: (np.broadcast_to((g / S)[:, :, None, None, None], shape).copy(),))


def gmp(x: Tensor) -> Tensor:
    """Global spatial maximum; ties send the gradient to the lowest linear index."""
    M, C = x.shape[:2]
    flat = x.data.reshape(M, C, -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def vjp(g):
        dx = np.zeros_like(flat)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
        return (dx.reshape(shape),)

    return emit("gmp", out, (x,), vjp)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    F, G = weight.shape
    if x.shape[-1] != F:
        raise DimensionError(f"linear: input last extent {x.shape[-1]} != weight rows {F}")
    X, W = x.data, weight.data
    lead = X.shape[:-1]

    def vjp(g):
        g2 = g.reshape(-1, G)
        gx = g @ W.T if x.requires_grad else None
        return gx, X.reshape(-1, F).T @ g2, g2.sum(axis=0)

    return emit("linear", X @ W + bias.data, (x, weight, bias), vjp)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps=LN_EPS) -> Tensor:
    F = x.shape[-1]
    if F < 2:
        raise InputError("layernorm needs at least 2 features")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    var = X.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    G = gamma.data

    def vjp(g):
        dxhat = g * G
        dx = inv / F * (F * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        g2 = g.reshape(-1, F)
        return dx, (g2 * xhat.reshape(-1, F)).sum(0), g2.sum(0)

    return emit("layernorm", xhat * G + beta.data, (x, gamma, beta), vjp)


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, update_stats=True, momentum=BN_MOMENTUM, eps=BN_EPS) -> Tensor:
    """Per-channel batch norm over ``(M, H, W, D)`` of a ``[M, C, H, W, D]`` input.

    In training mode batch statistics are used and, if ``update_stats``,
    ``running_mean``/``running_var`` are updated in place (unbiased variance).
    """
    X = x.data
    C = X.shape[1]
    axes = (0, 2, 3, 4)
    n = X.size // C
    bshape = (1, C, 1, 1, 1)
    G = gamma.data.reshape(bshape)
    if training:
        if n < 2:
            raise InputError("batchnorm3d in training mode needs at least 2 values per channel")
        mu = X.mean(axis=axes, keepdims=True)
        var = X.var(axis=axes, keepdims=True)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(C)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(C) * n / (n - 1)
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * G
        if training:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return emit("batchnorm3d", xhat * G + beta.data.reshape(bshape), (x, gamma, beta), vjp)


def conv_out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, pad=0) -> Tensor:
    """3D cross-correlation with zero padding on every side."""
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError("conv3d expects [B,Cin,H,W,D] input and [Cout,Cin,k,k,k] weight")
    B, Cin, H, W, D = x.shape
    Cout, Cw, k = weight.shape[:3]
    if Cw != Cin:
        raise DimensionError(f"conv3d: input has {Cin} channels, weight expects {Cw}")
    if stride < 1:
        raise InputError("conv3d stride must be >= 1")
    if any(k > n + 2 * pad for n in (H, W, D)):
        raise InputError(f"conv3d kernel {k} larger than padded input {(H, W, D)}")
    out_hwd = tuple(conv_out_extent(n, k, stride, pad) for n in (H, W, D))
    if pad:
        xp = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad, D + 2 * pad))
        xp[:, :, pad:pad + H, pad:pad + W, pad:pad + D] = x.data
    else:
        xp = x.data
    cols = _kernels.im2col3d(xp, k, stride, out_hwd)
    wmat = weight.data.reshape(Cout, -1)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(B, *out_hwd, Cout).transpose(0, 4, 1, 2, 3))
    xp_shape = xp.shape
    wshape = weight.shape

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, Cout)
        dw = (g2.T @ cols).reshape(wshape)
        db = g2.sum(axis=0)
        if not x.requires_grad:
            return None, dw, db
        dxp = _kernels.col2im3d(wmat.T @ g2.T, xp_shape, k, stride, out_hwd)
        if pad:
            dxp = dxp[:, :, pad:pad + H, pad:pad + W, pad:pad + D]
        return np.ascontiguousarray(dxp), dw, db

    return emit("conv3d", out, (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# similarity and loss
# ---------------------------------------------------------------------------

COS_NORM_FLOOR = 1e-12


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between ``a[..., :]`` and ``b[..., :]``.

    Entries where either vector has norm below 1e-12 are defined as 0.
    """
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    dot = (A * B).sum(-1)
    aa = (A * A).sum(-1)
    bb = (B * B).sum(-1)
    live = (np.sqrt(aa) >= COS_NORM_FLOOR) & (np.sqrt(bb) >= COS_NORM_FLOOR)
    denom = np.where(live, np.sqrt(aa * bb), 1.0)
    cos = np.where(live, np.clip(dot / denom, -1.0, 1.0), 0.0)

    def vjp(g):
        gl = np.where(live, g, 0.0)[..., None]
        d = denom[..., None]
        c = cos[..., None]
        ga = gl * (B / d - c * A / np.where(live, aa, 1.0)[..., None])
        gb = gl * (A / d - c * B / np.where(live, bb, 1.0)[..., None])
        return ga, gb

    return emit("cosine_similarity", cos, (a, b), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    Z = logits.data
    M, K = Z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != M:
        raise DimensionError(f"cross_entropy: {M} rows but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= K):
        raise InputError(f"cross_entropy: labels must lie in [0, {K})")
    z = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(M)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / M),)

    return emit("cross_entropy", np.asarray(loss), (logits,), vjp)
