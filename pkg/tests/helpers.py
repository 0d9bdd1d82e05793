"""Shared test utilities: finite-difference gradient checking.

The gradient oracle is the central-difference quotient
(f(x + h) - f(x - h)) / (2h) evaluated in float64 with h = 1e-5, compared
against the reverse-mode result coordinate by coordinate.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from voxseg import tensor as T


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    """max |a - n| scaled by the largest magnitude present in either array."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    num = float(np.max(np.abs(a - n))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0, float(np.max(np.abs(n))) if n.size else 0.0, 1e-8)
    return num / den


def gradcheck(
    build: Callable[[], T.Tensor],
    params: Sequence[T.Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    sample: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Check reverse-mode gradients of a scalar-valued graph.

    ``build`` constructs the graph from the current ``.data`` of ``params``
    (all float64, requires_grad=True) and returns the scalar output. When
    ``sample`` is given, only that many randomly chosen coordinates per
    parameter are finite-differenced; otherwise every coordinate is.

    Returns the worst relative error across all checked coordinates and
    asserts it is <= tol.
    """
    for p in params:
        assert p.data.dtype == np.float64, "gradcheck requires float64 parameters"
        p.zero_grad()
    out = build()
    out.backward()
    analytic = []
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        analytic.append(p.grad.copy())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        if sample is not None and flat.size > sample:
            idxs = np.sort(rng.choice(flat.size, size=sample, replace=False))
        else:
            idxs = np.arange(flat.size)
        numeric = np.empty(len(idxs), dtype=np.float64)
        with T.no_grad():
            for j, i in enumerate(idxs):
                orig = flat[i]
                flat[i] = orig + h
                fp = build().item()
                flat[i] = orig - h
                fm = build().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * h)
        err = rel_err(aflat[idxs], numeric)
        worst = max(worst, err)
    assert worst <= tol, f"gradient mismatch: worst relative error {worst:.3e} > {tol:.1e}"
    return worst


def leaf(rng: np.random.Generator, shape, low=-1.0, high=1.0) -> T.Tensor:
    """Float64 leaf tensor with uniform entries, for gradient checks."""
    return T.tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=np.float64)
