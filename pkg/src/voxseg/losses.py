"""Hybrid segmentation loss: soft dice + focal + active contour.

All three terms are built from the differentiable tape ops, so one backward
call through the returned scalar reaches the network parameters.

Inputs are probability maps ``p_pred`` in (0,1) and binary targets
``p_true``, both [N, C, D, H, W] with one channel per overlapping region.

Term shapes follow the printed equations:
- dice: per channel, 1 - 2*sum(t*p) / (sum(t^2) + sum(p^2) + eps), summed
  over channels (sums run over the whole batch's voxels);
- focal: -(1/N) * sum((1-p)^gamma * t * log(p + eps)) with N counting every
  voxel across batch, channels and space — a foreground-only term as
  printed (``symmetric_focal`` adds the mirrored background term);
- active contour: volume |sum p*(c1-t)^2| + |sum (1-p)*(c2-t)^2| with the
  absolute value around each whole sum, plus length
  sum sqrt(|dz^2 + dy^2 + dx^2| + eps) from forward differences whose
  trailing-slice gradient is zero.

The default reduction keeps the raw sums of the equations; the
``mean_per_voxel`` reduction divides the combined active-contour term by
the voxel count so toy-scale training is not dominated by it. The report
always records the raw sums.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ShapeError

REDUCTIONS = ("sum", "mean_per_voxel")


@dataclass(frozen=True)
class LossConfig:
    eps_dice: float = 1e-5
    eps_focal: float = 1e-8
    eps_length: float = 1e-8
    gamma: float = 2.0
    c1: float = 1.0
    c2: float = 0.0
    term_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (dice, focal, acl)
    reduction: str = "sum"
    symmetric_focal: bool = False

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        for name in ("eps_dice", "eps_focal", "eps_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.c1 == self.c2:
            raise ConfigError("c1 and c2 must differ")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if len(self.term_weights) != 3:
            raise ConfigError("term_weights must be (w_dice, w_focal, w_acl)")


@dataclass
class LossReport:
    """Scalar components (floats, raw sums) plus the combined tensor for backward."""

    total: float
    dice: float
    focal: float
    acl_volume: float
    acl_length: float
    dice_per_channel: tuple[float, ...]
    loss: T.Tensor


def _check_pair(p_pred: T.Tensor, p_true: T.Tensor) -> None:
    if p_pred.shape != p_true.shape:
        raise ShapeError(f"prediction/target shape mismatch: {p_pred.shape} vs {p_true.shape}")
    if len(p_pred.shape) != 5:
        raise ShapeError(f"expected [N,C,D,H,W] maps, got {p_pred.shape}")


def soft_dice_per_channel(p_pred: T.Tensor, p_true: T.Tensor, cfg: LossConfig) -> list[T.Tensor]:
    """One scalar soft-dice loss per channel, each over all batch voxels."""
    _check_pair(p_pred, p_true)
    out = []
    for c in range(p_pred.shape[1]):
        pc = T.narrow(p_pred, 1, c, 1)
        tc = T.narrow(p_true, 1, c, 1)
        num = T.mul_const(T.tsum(T.mul(tc, pc)), 2.0)
        den = T.add_const(T.add(T.tsum(T.square(tc)), T.tsum(T.square(pc))), cfg.eps_dice)
        out.append(T.const_minus(1.0, T.div(num, den)))
    return out


def soft_dice_loss(p_pred: T.Tensor, p_true: T.Tensor, cfg: LossConfig) -> T.Tensor:
    """Sum of the per-channel soft dice losses."""
    terms = soft_dice_per_channel(p_pred, p_true, cfg)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def focal_loss(p_pred: T.Tensor, p_true: T.Tensor, cfg: LossConfig) -> T.Tensor:
    """-(1/N) * sum((1 - p)^gamma * t * log(p + eps)), N = total voxel count."""
    _check_pair(p_pred, p_true)
    n = p_pred.size
    modulator = T.pow_const(T.const_minus(1.0, p_pred), cfg.gamma)
    logp = T.log(T.add_const(p_pred, cfg.eps_focal))
    total = T.tsum(T.mul(T.mul(modulator, p_true), logp))
    if cfg.symmetric_focal:
        mod_bg = T.pow_const(p_pred, cfg.gamma)
        log1mp = T.log(T.add_const(T.const_minus(1.0, p_pred), cfg.eps_focal))
        total = T.add(total, T.tsum(T.mul(T.mul(mod_bg, T.const_minus(1.0, p_true)), log1mp)))
    return T.mul_const(total, -1.0 / n)


def active_contour_loss(p_pred: T.Tensor, p_true: T.Tensor, cfg: LossConfig) -> tuple[T.Tensor, T.Tensor]:
    """(volume, length) region terms.

    volume = |sum p*(c1-t)^2| + |sum (1-p)*(c2-t)^2|, absolute value taken
    of each completed sum (for c1=1, c2=0 the operands are nonnegative, so
    it is the identity there). length sums sqrt(|g^2| + eps) of the forward
    -difference gradient magnitude over every voxel of every channel.
    """
    _check_pair(p_pred, p_true)
    in_sq = T.square(T.const_minus(cfg.c1, p_true))
    out_sq = T.square(T.const_minus(cfg.c2, p_true))
    vol_in = T.absolute(T.tsum(T.mul(p_pred, in_sq)))
    vol_out = T.absolute(T.tsum(T.mul(T.const_minus(1.0, p_pred), out_sq)))
    volume = T.add(vol_in, vol_out)

    dz = T.square(T.forward_diff(p_pred, 2))
    dy = T.square(T.forward_diff(p_pred, 3))
    dx = T.square(T.forward_diff(p_pred, 4))
    mag = T.absolute(T.add(T.add(dz, dy), dx))
    length = T.tsum(T.sqrt(T.add_const(mag, cfg.eps_length)))
    return volume, length


def hybrid_loss(p_pred: T.Tensor, p_true: T.Tensor, cfg: LossConfig) -> LossReport:
    """Weighted sum of the three terms, with per-component values recorded."""
    cfg.validate()
    w_dice, w_focal, w_acl = cfg.term_weights
    dice_ch = soft_dice_per_channel(p_pred, p_true, cfg)
    dice = dice_ch[0]
    for t in dice_ch[1:]:
        dice = T.add(dice, t)
    focal = focal_loss(p_pred, p_true, cfg)
    volume, length = active_contour_loss(p_pred, p_true, cfg)
    acl = T.add(volume, length)
    if cfg.reduction == "mean_per_voxel":
        acl = T.mul_const(acl, 1.0 / p_pred.size)
    total = T.add(
        T.add(T.mul_const(dice, w_dice), T.mul_const(focal, w_focal)),
        T.mul_const(acl, w_acl),
    )
    return LossReport(
        total=total.item(),
        dice=dice.item(),
        focal=focal.item(),
        acl_volume=volume.item(),
        acl_length=length.item(),
        dice_per_channel=tuple(t.item() for t in dice_ch),
        loss=total,
    )
