"""Adam with polynomial learning-rate decay and L2 kernel regularization.

The learning rate follows alpha0 * (1 - e / N_e)^0.9 per epoch. L2 applies
only to convolution kernels (parameters of kind "kernel"): normalization
affines and biases are exempt. Gradients live on the parameter tensors, so
both operations take the store directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError
from .network import ParameterStore


@dataclass(frozen=True)
class ScheduleConfig:
    alpha0: float = 1e-4
    total_epochs: int = 300
    power: float = 0.9
    l2_weight: float = 1e-5

    def validate(self) -> None:
        if self.alpha0 <= 0:
            raise ConfigError(f"alpha0 must be positive, got {self.alpha0}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.power <= 0:
            raise ConfigError(f"power must be positive, got {self.power}")
        if self.l2_weight < 0:
            raise ConfigError(f"l2_weight must be >= 0, got {self.l2_weight}")


def poly_lr(epoch: int, cfg: ScheduleConfig) -> float:
    """alpha0 * (1 - e/N_e)^power, defined for 0 <= e <= N_e."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ConfigError(f"epoch {epoch} outside schedule range [0, {cfg.total_epochs}]")
    return cfg.alpha0 * (1.0 - epoch / cfg.total_epochs) ** cfg.power


def apply_l2(store: ParameterStore, l2_weight: float, include_pointwise: bool = True) -> None:
    """Add the gradient of l2_weight * ||K||^2, i.e. 2*l2_weight*K, to every
    kernel's gradient. Other parameter kinds are untouched. 1x1x1 kernels are
    regularized too by default; pass include_pointwise=False to exempt them."""
    if l2_weight == 0.0:
        return
    for p in store.params():
        if p.kind != "kernel":
            continue
        t = p.tensor
        if not include_pointwise and all(k == 1 for k in t.shape[2:]):
            continue
        if t.grad is None:
            raise ConfigError(f"apply_l2: kernel {p.name!r} has no gradient")
        t.grad += (2.0 * l2_weight) * t.data


@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, store: ParameterStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(beta1=beta1, beta2=beta2, eps=eps)
        for p in store.params():
            state.m[p.name] = np.zeros_like(p.tensor.data)
            state.v[p.name] = np.zeros_like(p.tensor.data)
        return state


def adam_step(store: ParameterStore, state: AdamState, lr: float) -> None:
    """One in-place update: w -= lr * m_hat / (sqrt(v_hat) + eps).

    All gradients are checked for finiteness before anything mutates, so a
    bad step aborts cleanly.
    """
    updates = []
    for p in store.params():
        g = p.tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for {p.name!r}; step aborted")
        updates.append((p, g))

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g in updates:
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p.tensor.data -= (lr / bc1) * m / denom
