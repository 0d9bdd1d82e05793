"""Reverse-mode autodiff on dense numpy arrays.

A ``Tensor`` wraps an ndarray (float32 for training, float64 for gradient
checking) plus an optional gradient buffer. Ops record their inputs and a
hand-derived backward function on the output tensor; ``backward()`` walks
the resulting DAG once in reverse topological order, so a tensor consumed
by k ops receives the sum of k contributions.

Shapes follow the channels-first convention: activations are
``[N, C, D, H, W]``, convolution kernels ``[Cout, Cin, kD, kH, kW]``.
There is no implicit broadcasting; elementwise ops demand equal shapes and
scalars go through the ``*_const`` ops.

Every forward output and every fully-accumulated gradient is checked for
NaN/Inf and raises ``NonFiniteError`` on violation.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suppresses tape construction (inference mode)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense array with optional gradient and tape bookkeeping.

    ``_parents`` and ``_backward`` are set only on op outputs that need a
    gradient path; leaves (parameters, inputs) have neither. ``_backward``
    takes the upstream gradient and returns one contribution per parent
    (``None`` for parents that do not require grad).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if data.dtype.type not in DTYPES:
            raise TypeError(f"unsupported dtype {data.dtype}; use float32 or float64")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op: Optional[str] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        grad = "with grad" if self.grad is not None else "no grad"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, {grad}, op={self.op})"

    # Operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return const_minus(other, self)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_const(self, 1.0 / other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Leaf tensor from array-like data."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    _check_finite(arr, "tensor()")
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Optional[Callable],
    op: str,
) -> Tensor:
    """Wrap an op result, attaching the tape node only when some parent
    participates in differentiation."""
    _check_finite(data, f"output of {op}")
    requires = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    out.op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def backward(root: Tensor) -> None:
    """Reverse pass from a scalar root.

    Uses a pass-local gradient table, then adds the finished gradients into
    each tensor's ``.grad``; calling backward twice therefore accumulates,
    and a tensor feeding k ops is visited exactly once with the sum of the
    k upstream contributions.
    """
    if root.size != 1:
        raise ShapeError(f"backward() root must be scalar, got shape {root.shape}")

    # Iterative post-order topological sort (graphs can be deep).
    topo: list[Tensor] = []
    state: dict[int, int] = {}  # id -> 0 discovered, 1 finished
    stack: list[Tensor] = [root]
    while stack:
        node = stack[-1]
        nid = id(node)
        if nid not in state:
            state[nid] = 0
            for p in node._parents:
                if id(p) not in state:
                    stack.append(p)
        else:
            stack.pop()
            if state[nid] == 0:
                state[nid] = 1
                topo.append(node)

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        go = grads.pop(id(node), None)
        if go is None:
            continue
        _check_finite(go, f"gradient of {node.op or 'leaf'}")
        if node.requires_grad:
            if node.grad is None:
                node.grad = go.copy()
            else:
                node.grad += go
        if node._backward is None:
            continue
        contribs = node._backward(go)
        for parent, contrib in zip(node._parents, contribs):
            if contrib is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] += contrib
            else:
                grads[pid] = contrib


# ---------------------------------------------------------------------------
# Elementwise / reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bwd(go):
        return (go if a.requires_grad else None, go if b.requires_grad else None)

    return from_op(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bwd(go):
        return (go if a.requires_grad else None, -go if b.requires_grad else None)

    return from_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bwd(go):
        ga = go * b.data if a.requires_grad else None
        gb = go * a.data if b.requires_grad else None
        return (ga, gb)

    return from_op(a.data * b.data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")

    def bwd(go):
        ga = go / b.data if a.requires_grad else None
        gb = -go * a.data / (b.data * b.data) if b.requires_grad else None
        return (ga, gb)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return from_op(out, (a, b), bwd, "div")


def add_const(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def bwd(go):
        return (go,)

    return from_op(x.data + c, (x,), bwd, "add_const")


def mul_const(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def bwd(go):
        return (go * c,)

    return from_op(x.data * c, (x,), bwd, "mul_const")


def const_minus(c: float, x: Tensor) -> Tensor:
    """c - x (used for 1 - p terms)."""
    c = x.data.dtype.type(c)

    def bwd(go):
        return (-go,)

    return from_op(c - x.data, (x,), bwd, "const_minus")


def pow_const(x: Tensor, p: float) -> Tensor:
    """x ** p. Non-integer exponents require a strictly positive base."""
    if p != int(p) and np.any(x.data <= 0):
        raise ShapeError(f"pow_const: non-integer exponent {p} needs positive base")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x.data**p

    def bwd(go):
        return (go * p * x.data ** (p - 1),)

    return from_op(out, (x,), bwd, "pow_const")


def square(x: Tensor) -> Tensor:
    def bwd(go):
        return (go * 2 * x.data,)

    return from_op(x.data * x.data, (x,), bwd, "square")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def bwd(go):
        return (go / (2 * out),)

    return from_op(out, (x,), bwd, "sqrt")


def log(x: Tensor) -> Tensor:
    def bwd(go):
        return (go / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return from_op(out, (x,), bwd, "log")


def clamp_min(x: Tensor, c: float) -> Tensor:
    """max(x, c); gradient flows only where x > c."""
    c = x.data.dtype.type(c)
    mask = x.data > c

    def bwd(go):
        return (go * mask,)

    return from_op(np.maximum(x.data, c), (x,), bwd, "clamp_min")


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient sign(x) (0 at x = 0)."""

    def bwd(go):
        return (go * np.sign(x.data),)

    return from_op(np.abs(x.data), (x,), bwd, "abs")


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient at 0 is 0."""
    mask = x.data > 0

    def bwd(go):
        return (go * mask,)

    return from_op(np.maximum(x.data, 0), (x,), bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """1 / (1 + exp(-x)), computed via exp(-|x|) so neither tail overflows."""
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype)

    def bwd(go):
        return (go * out * (1.0 - out),)

    return from_op(out, (x,), bwd, "sigmoid")


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(go):
        return (np.broadcast_to(go, x.shape).copy(),)

    return from_op(out, (x,), bwd, "sum")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into a zero buffer."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(go):
        gx = np.zeros_like(x.data)
        gx[idx] = go
        return (gx,)

    return from_op(np.ascontiguousarray(x.data[idx]), (x,), bwd, "narrow")


def forward_diff(x: Tensor, axis: int) -> Tensor:
    """Forward difference along ``axis``: out[i] = x[i+1] - x[i], with the
    trailing slice set to zero (same output shape as the input)."""
    n = x.shape[axis]
    out = np.zeros_like(x.data)
    head = [slice(None)] * x.data.ndim
    tail = [slice(None)] * x.data.ndim
    head[axis] = slice(0, n - 1)
    tail[axis] = slice(1, n)
    head, tail = tuple(head), tuple(tail)
    out[head] = x.data[tail] - x.data[head]

    def bwd(go):
        gx = np.zeros_like(x.data)
        gx[tail] += go[head]
        gx[head] -= go[head]
        return (gx,)

    return from_op(out, (x,), bwd, "forward_diff")
