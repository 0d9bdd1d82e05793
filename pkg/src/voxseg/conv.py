"""3D convolution with interchangeable evaluation engines.

Three engines compute the same convolution:

- ``"direct"``: per-tap loops in plain Python. For every kernel tap
  ``(ci, kz, ky, kx)`` in row-major order, the corresponding strided input
  window is scaled and accumulated into the output. Reference path.
- ``"im2col"``: gathers the same windows into a column matrix and
  accumulates tap-by-tap in the identical order. Because each output
  element sees the same multiplies and adds in the same sequence, this is
  bitwise-identical to ``"direct"`` in every dtype.
- ``"blas"``: the column matrix contracted with a single ``matmul``
  (default). Fast, deterministic for a fixed thread count, but the BLAS
  reduction order (and FMA) means agreement with the loop engines is only
  up to rounding, ~1e-12 relative in float64.

Column gathers are chunked along output depth so the scratch stays within
``COL_BUDGET_BYTES`` regardless of volume size.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, from_op

ENGINES = ("direct", "im2col", "blas")
COL_BUDGET_BYTES = 256 * 2**20


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel extent {k} exceeds padded input {size + 2 * padding}")
    return span // stride + 1


def conv_output_shape(x_shape, w_shape, stride: int, padding: int) -> tuple[int, ...]:
    n, cin, d, h, w = x_shape
    cout, cin_w, kd, kh, kw = w_shape
    if cin != cin_w:
        raise ShapeError(f"conv3d: input has {cin} channels, kernel expects {cin_w}")
    return (
        n,
        cout,
        _out_extent(d, kd, stride, padding),
        _out_extent(h, kh, stride, padding),
        _out_extent(w, kw, stride, padding),
    )


def _pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _tap_window(xp: np.ndarray, ci, kz, ky, kx, stride, do, ho, wo):
    """Strided view of the padded input that tap (ci,kz,ky,kx) multiplies."""
    s = stride
    return xp[:, ci, kz : kz + s * (do - 1) + 1 : s, ky : ky + s * (ho - 1) + 1 : s, kx : kx + s * (wo - 1) + 1 : s]


def _gather_cols(xp: np.ndarray, kd, kh, kw, stride, do0, do1, ho, wo) -> np.ndarray:
    """Column matrix [N, Cin*kd*kh*kw, (do1-do0)*ho*wo] for an output-depth slab.

    Column index order is (ci, kz, ky, kx), matching ``kernel.reshape(Cout, -1)``.
    """
    n, cin = xp.shape[:2]
    s = stride
    slab = xp[:, :, s * do0 : s * (do1 - 1) + kd, :, :]
    win = sliding_window_view(slab, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::s, ::s, ::s]  # [N, Cin, dz, ho, wo, kd, kh, kw]
    win = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)  # [N, Cin, kd, kh, kw, dz, ho, wo]
    return np.ascontiguousarray(win).reshape(n, cin * kd * kh * kw, (do1 - do0) * ho * wo)


def _slab_depth(k: int, ho: int, wo: int, n: int, itemsize: int) -> int:
    per_slice = k * ho * wo * n * itemsize
    return max(1, COL_BUDGET_BYTES // max(per_slice, 1))


def _forward_direct(xp: np.ndarray, w: np.ndarray, stride: int, out_shape) -> np.ndarray:
    n, cout, do, ho, wo = out_shape
    cin, kd, kh, kw = w.shape[1:]
    out = np.zeros(out_shape, dtype=xp.dtype)
    for ci in range(cin):
        for kz in range(kd):
            for ky in range(kh):
                for kx in range(kw):
                    window = _tap_window(xp, ci, kz, ky, kx, stride, do, ho, wo)
                    for co in range(cout):
                        out[:, co] += w[co, ci, kz, ky, kx] * window
    return out


def _forward_im2col(xp: np.ndarray, w: np.ndarray, stride: int, out_shape, blas: bool) -> np.ndarray:
    n, cout, do, ho, wo = out_shape
    k = w.shape[1] * w.shape[2] * w.shape[3] * w.shape[4]
    w2d = w.reshape(cout, k)
    out = np.empty(out_shape, dtype=xp.dtype)
    step = _slab_depth(k, ho, wo, n, xp.itemsize)
    for do0 in range(0, do, step):
        do1 = min(do0 + step, do)
        cols = _gather_cols(xp, w.shape[2], w.shape[3], w.shape[4], stride, do0, do1, ho, wo)
        if blas:
            slab = np.matmul(w2d, cols)
        else:
            # Tap-by-tap accumulation in the same order as the direct engine.
            slab = np.zeros((n, cout, cols.shape[2]), dtype=xp.dtype)
            for j in range(k):
                slab += w2d[:, j : j + 1] * cols[:, j : j + 1, :]
        out[:, :, do0:do1] = slab.reshape(n, cout, do1 - do0, ho, wo)
    return out


def conv3d_forward(
    x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int, padding: int, engine: str
) -> np.ndarray:
    """Plain-array convolution forward (shared by the op and by tests)."""
    if engine not in ENGINES:
        raise ShapeError(f"unknown conv engine {engine!r}; expected one of {ENGINES}")
    out_shape = conv_output_shape(x.shape, w.shape, stride, padding)
    xp = _pad_input(x, padding)
    if engine == "direct":
        out = _forward_direct(xp, w, stride, out_shape)
    else:
        out = _forward_im2col(xp, w, stride, out_shape, blas=(engine == "blas"))
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
        out += b.reshape(1, -1, 1, 1, 1)
    return out


def _backward_taps(xp, w, go, stride, out_shape, need_x):
    """Per-tap einsum backward used by the loop engines."""
    n, cout, do, ho, wo = out_shape
    cin, kd, kh, kw = w.shape[1:]
    s = stride
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp) if need_x else None
    for ci in range(cin):
        for kz in range(kd):
            for ky in range(kh):
                for kx in range(kw):
                    window = _tap_window(xp, ci, kz, ky, kx, stride, do, ho, wo)
                    gw[:, ci, kz, ky, kx] = np.einsum("ncdhw,ndhw->c", go, window)
                    if need_x:
                        gxp[:, ci, kz : kz + s * (do - 1) + 1 : s, ky : ky + s * (ho - 1) + 1 : s, kx : kx + s * (wo - 1) + 1 : s] += np.tensordot(
                            go, w[:, ci, kz, ky, kx], axes=([1], [0])
                        )
    return gw, gxp


def _backward_cols(xp, w, go, stride, out_shape, need_x):
    """Chunked im2col backward: one matmul pair per output-depth slab."""
    n, cout, do, ho, wo = out_shape
    cin, kd, kh, kw = w.shape[1:]
    k = cin * kd * kh * kw
    s = stride
    w2d = w.reshape(cout, k)
    gw2d = np.zeros((cout, k), dtype=w.dtype)
    gxp = np.zeros_like(xp) if need_x else None
    step = _slab_depth(k, ho, wo, n, xp.itemsize)
    for do0 in range(0, do, step):
        do1 = min(do0 + step, do)
        dz = do1 - do0
        cols = _gather_cols(xp, kd, kh, kw, stride, do0, do1, ho, wo)
        go_slab = go[:, :, do0:do1].reshape(n, cout, dz * ho * wo)
        gw2d += np.matmul(go_slab, cols.transpose(0, 2, 1)).sum(axis=0)
        if not need_x:
            continue
        gcols = np.matmul(w2d.T, go_slab).reshape(n, cin, kd, kh, kw, dz, ho, wo)
        for kz in range(kd):
            for ky in range(kh):
                for kx in range(kw):
                    gxp[
                        :,
                        :,
                        kz + s * do0 : kz + s * (do1 - 1) + 1 : s,
                        ky : ky + s * (ho - 1) + 1 : s,
                        kx : kx + s * (wo - 1) + 1 : s,
                    ] += gcols[:, :, kz, ky, kx]
    return gw2d.reshape(w.shape), gxp


def conv3d_backward(x, w, go, stride, padding, engine, need_x=True):
    """Gradients (gx, gw, gb) for the forward above. The padded input is
    recomputed here rather than kept alive by the tape."""
    out_shape = conv_output_shape(x.shape, w.shape, stride, padding)
    xp = _pad_input(x, padding)
    if engine == "blas":
        gw, gxp = _backward_cols(xp, w, go, stride, out_shape, need_x)
    else:
        gw, gxp = _backward_taps(xp, w, go, stride, out_shape, need_x)
    if not need_x:
        gx = None
    elif padding:
        p = padding
        gx = np.ascontiguousarray(gxp[:, :, p:-p, p:-p, p:-p])
    else:
        gx = gxp
    gb = go.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


def conv3d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    engine: str = "blas",
) -> Tensor:
    """Strided 3D convolution: x [N,Cin,D,H,W] * w [Cout,Cin,kD,kH,kW] (+ b [Cout])."""
    bd = b.data if b is not None else None
    out = conv3d_forward(x.data, w.data, bd, stride, padding, engine)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(go):
        gx, gw, gb = conv3d_backward(x.data, w.data, go, stride, padding, engine, need_x=x.requires_grad)
        grads = [gx, gw if w.requires_grad else None]
        if b is not None:
            grads.append(gb if b.requires_grad else None)
        return tuple(grads)

    return from_op(out, parents, bwd, "conv3d")
