"""Normalization, resampling, and dropout ops for volumetric activations.

All activations are [N, C, D, H, W]. Normalization uses biased variance
(divide by the element count) and an epsilon inside the square root.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor, from_op


def _affine_params_ok(x: Tensor, gamma: Tensor, beta: Tensor, op: str) -> int:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"{op}: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    return c


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize every group of C/num_groups channels per sample, then apply
    the per-channel affine. ``num_groups == C`` is instance normalization."""
    c = _affine_params_ok(x, gamma, beta, "group_norm")
    if num_groups < 1 or c % num_groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible into {num_groups} groups")
    n = x.shape[0]
    g = num_groups
    dt = x.data.dtype

    xg = x.data.reshape(n, g, -1)  # [N, G, m]
    mu = xg.mean(axis=2, keepdims=True)
    var = np.square(xg - mu).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = ((xg - mu) * inv).reshape(x.shape)
    gb = gamma.data.reshape(1, c, 1, 1, 1)
    out = xhat * gb + beta.data.reshape(1, c, 1, 1, 1)

    def bwd(go):
        gg = (go * xhat).sum(axis=(0, 2, 3, 4)) if gamma.requires_grad else None
        gbeta = go.sum(axis=(0, 2, 3, 4)) if beta.requires_grad else None
        if x.requires_grad:
            h = (go * gb).reshape(n, g, -1)
            xh = xhat.reshape(n, g, -1)
            gx = inv * (h - h.mean(axis=2, keepdims=True) - xh * (h * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        else:
            gx = None
        return (gx, gg, gbeta)

    return from_op(out, (x, gamma, beta), bwd, "group_norm")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization (group norm with one channel per group)."""
    return group_norm(x, gamma, beta, num_groups=x.shape[1], eps=eps)


@dataclass
class BatchNormState:
    """Running statistics owned by a batch-norm layer (not part of the tape)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: int = 0

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over the batch and spatial axes.

    Training mode normalizes with the current batch's biased statistics and
    folds them into the running buffers as
    ``running = (1 - momentum) * running + momentum * batch``. Eval mode
    normalizes with the running buffers (no gradient flows through them)
    and refuses to run before any batch has been tracked.
    """
    c = _affine_params_ok(x, gamma, beta, "batch_norm")
    dt = x.data.dtype
    axes = (0, 2, 3, 4)
    gshape = (1, c, 1, 1, 1)
    gb = gamma.data.reshape(gshape)

    if training:
        mu = x.data.mean(axis=axes)
        var = np.square(x.data - mu.reshape(gshape)).mean(axis=axes)
        state.running_mean = ((1.0 - momentum) * state.running_mean + momentum * mu).astype(dt)
        state.running_var = ((1.0 - momentum) * state.running_var + momentum * var).astype(dt)
        state.num_batches_tracked += 1
        inv = (1.0 / np.sqrt(var + dt.type(eps))).reshape(gshape)
        xhat = (x.data - mu.reshape(gshape)) * inv
        out = xhat * gb + beta.data.reshape(gshape)
        m = x.data.size // c

        def bwd(go):
            gg = (go * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = go.sum(axis=axes) if beta.requires_grad else None
            if x.requires_grad:
                h = go * gb
                hm = h.sum(axis=axes).reshape(gshape) / m
                hxm = (h * xhat).sum(axis=axes).reshape(gshape) / m
                gx = inv * (h - hm - xhat * hxm)
            else:
                gx = None
            return (gx, gg, gbeta)

        return from_op(out, (x, gamma, beta), bwd, "batch_norm")

    if state.num_batches_tracked == 0:
        raise DataError("batch_norm: eval mode requested before any batch statistics were tracked")
    inv = (1.0 / np.sqrt(state.running_var.astype(dt) + dt.type(eps))).reshape(gshape)
    xhat = (x.data - state.running_mean.astype(dt).reshape(gshape)) * inv
    out = xhat * gb + beta.data.reshape(gshape)

    def bwd_eval(go):
        gg = (go * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = go.sum(axis=axes) if beta.requires_grad else None
        gx = go * gb * inv if x.requires_grad else None
        return (gx, gg, gbeta)

    return from_op(out, (x, gamma, beta), bwd_eval, "batch_norm")


# ---------------------------------------------------------------------------
# Trilinear 2x upsampling (align_corners=False)
# ---------------------------------------------------------------------------
# Source coordinate for output index j is (j + 0.5)/2 - 0.5, clamped to the
# input range. Doubling along one axis therefore reads, for input length n:
#   out[0]        = x[0]
#   out[2i+1]     = 0.75 x[i] + 0.25 x[i+1]   (i = 0 .. n-2)
#   out[2i]       = 0.25 x[i-1] + 0.75 x[i]   (i = 1 .. n-1)
#   out[2n-1]     = x[n-1]
# and the three axes are applied separably.


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == 1:
        return np.repeat(a, 2, axis=axis)
    arr = np.moveaxis(a, axis, 0)
    out = np.empty((2 * n,) + arr.shape[1:], dtype=a.dtype)
    t = a.dtype.type
    out[0] = arr[0]
    out[1 : 2 * n - 2 : 2] = t(0.75) * arr[: n - 1] + t(0.25) * arr[1:]
    out[2 : 2 * n - 1 : 2] = t(0.25) * arr[: n - 1] + t(0.75) * arr[1:]
    out[2 * n - 1] = arr[n - 1]
    return np.moveaxis(out, 0, axis)


def _up_axis_t(g: np.ndarray, axis: int, n: int) -> np.ndarray:
    """Transpose (adjoint) of ``_up_axis`` for an input of length n."""
    garr = np.moveaxis(g, axis, 0)
    gx = np.zeros((n,) + garr.shape[1:], dtype=g.dtype)
    t = g.dtype.type
    if n == 1:
        gx[0] = garr[0] + garr[1]
        return np.moveaxis(gx, 0, axis)
    odd = garr[1 : 2 * n - 2 : 2]
    even = garr[2 : 2 * n - 1 : 2]
    gx[: n - 1] += t(0.75) * odd + t(0.25) * even
    gx[1:] += t(0.25) * odd + t(0.75) * even
    gx[0] += garr[0]
    gx[n - 1] += garr[2 * n - 1]
    return np.moveaxis(gx, 0, axis)


def upsample_trilinear2x(x: Tensor) -> Tensor:
    """Double D, H and W of a [N,C,D,H,W] tensor by trilinear interpolation."""
    if len(x.shape) != 5:
        raise ShapeError(f"upsample_trilinear2x expects [N,C,D,H,W], got {x.shape}")
    d, h, w = x.shape[2:]
    out = _up_axis(_up_axis(_up_axis(x.data, 2), 3), 4)

    def bwd(go):
        g = _up_axis_t(go, 4, w)
        g = _up_axis_t(g, 3, h)
        g = _up_axis_t(g, 2, d)
        return (g,)

    return from_op(np.ascontiguousarray(out), (x,), bwd, "upsample_trilinear2x")


def spatial_dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Zero whole channels with probability p and rescale survivors by 1/(1-p).

    One Bernoulli draw per (sample, channel); identity when not training or
    p == 0. The caller supplies the RNG stream so runs are reproducible.
    """
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"spatial_dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    n, c = x.shape[:2]
    keep = (rng.random((n, c)) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    mask = keep.reshape(n, c, 1, 1, 1)

    def bwd(go):
        return (go * mask,)

    return from_op(x.data * mask, (x,), bwd, "spatial_dropout")
