"""Fused differentiable operations with hand-written backward passes."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericError
from .tensor import Tensor, _sigmoid


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each token over its last axis, then apply ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last extent {d} of {x.shape} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x[..., in]`` and ``weight[in, out]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        dx = (g @ wd.T) if x.requires_grad else None
        dw = xd.reshape(-1, wd.shape[0]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return dx, dw
        db = g2.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-interpolation matrix for 1-D linear resampling, align_corners=False.

    Source coordinates below zero are clamped to the first sample, matching
    the common half-pixel convention.
    """
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"resize: extents must be >= 1, got {n_in} -> {n_out}")
    mat = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize ``x[..., h, w, d]`` to ``[..., out_h, out_w, d]`` channel-wise."""
    if x.ndim < 3:
        raise DimensionError(f"bilinear_resize: expected [..., h, w, d], got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (out_h, out_w):
        return x
    ry = resize_matrix(h, out_h, x.dtype)
    rx = resize_matrix(w, out_w, x.dtype)
    out = np.einsum("ph,...hwd->...pwd", ry, x.data)
    out = np.einsum("qw,...pwd->...pqd", rx, out)

    def backward(g):
        gx = np.einsum("qw,...pqd->...pwd", rx, g)
        gx = np.einsum("ph,...pwd->...hwd", ry, gx)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-size 3x3 cross-correlation, zero padding 1, stride 1.

    ``x[..., h, w, c_in]``, ``weight[3, 3, c_in, c_out]``, ``bias[c_out]``.
    """
    if weight.ndim != 4 or weight.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d_3x3: kernel must be [3, 3, c_in, c_out], got {weight.shape}")
    if x.ndim < 3 or x.shape[-1] != weight.shape[2]:
        raise DimensionError(f"conv2d_3x3: input {x.shape} has wrong channels for kernel {weight.shape}")
    if bias.shape != (weight.shape[3],):
        raise DimensionError(f"conv2d_3x3: bias {bias.shape} vs kernel {weight.shape}")
    xd = x.data
    h, w, cin = xd.shape[-3:]
    cout = weight.shape[3]
    lead = xd.shape[:-3]
    pad = [(0, 0)] * len(lead) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(xd, pad)
    cols = np.stack([xp[..., i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=-2)
    cols = cols.reshape(*lead, h, w, 9 * cin)
    wmat = weight.data.reshape(9 * cin, cout)
    out = cols @ wmat + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.reshape(-1, 9 * cin).T @ g2).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g @ wmat.T).reshape(*lead, h, w, 9, cin)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            k = 0
            for i in range(3):
                for j in range(3):
                    dxp[..., i:i + h, j:j + w, :] += dcols[..., k, :]
                    k += 1
            dx = dxp[..., 1:1 + h, 1:1 + w, :]
        return dx, dw, db

    return Tensor._from_op(out, (x, weight, bias), backward)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style smooth L1 of a residual."""
    xd = x.data
    ax = np.abs(xd)
    small = ax < beta
    out = np.where(small, 0.5 * xd * xd / beta, ax - 0.5 * beta)

    def backward(g):
        return (g * np.where(small, xd / beta, np.sign(xd)),)

    return Tensor._from_op(out, (x,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits (stable form)."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    out = np.logaddexp(0.0, z).astype(z.dtype, copy=False) - y * z

    def backward(g):
        return (g * (_sigmoid(z) - y),)

    return Tensor._from_op(out, (logits,), backward)


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis (one element per row)."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"gather_last: index {index.shape} vs input {x.shape}")
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return Tensor._from_op(out, (x,), backward)

