"""Evaluation metrics: per-class dice, sensitivity, specificity, and
boundary Hausdorff distances (max and 95th percentile) in millimetres.

Hausdorff uses the exact Euclidean distance transform to find each boundary
voxel's nearest counterpart, then recomputes that distance in f64 from the
voxel index difference — the same arithmetic a brute-force all-pairs scan
performs, so the two agree exactly rather than approximately. Boundary
voxels are foreground voxels with at least one face-adjacent (6-connected)
background neighbor; voxels on the array edge count as boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError
from .volume import CLASS_NAMES, Volume, labels_to_channels


def _as_bool(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeError(f"{name} must be a 3D mask, got shape {mask.shape}")
    return mask.astype(bool)


def _check_pair(pred, truth):
    pred = _as_bool(pred, "pred")
    truth = _as_bool(truth, "truth")
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def confusion_counts(pred, truth) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) over the voxel grid."""
    pred, truth = _check_pair(pred, truth)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    tn = pred.size - tp - fp - fn
    return tp, fp, tn, fn


def dice_metric(pred, truth) -> float:
    """2|P∩T| / (|P|+|T|); 1.0 when both masks are empty, 0.0 when exactly
    one is."""
    tp, fp, _, fn = confusion_counts(pred, truth)
    p_size, t_size = tp + fp, tp + fn
    if p_size == 0 and t_size == 0:
        return 1.0
    if p_size == 0 or t_size == 0:
        return 0.0
    return 2.0 * tp / (p_size + t_size)


def sensitivity_specificity(pred, truth) -> tuple[float, float]:
    """(TP/(TP+FN), TN/(TN+FP)). An empty truth makes sensitivity vacuous:
    1.0 if pred is empty too, else 0.0; an all-ones truth likewise makes
    specificity 1.0 (there are no negatives to misclassify)."""
    tp, fp, tn, fn = confusion_counts(pred, truth)
    if tp + fn == 0:
        sens = 1.0 if fp == 0 else 0.0
    else:
        sens = tp / (tp + fn)
    if tn + fp == 0:
        spec = 1.0
    else:
        spec = tn / (tn + fp)
    return sens, spec


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with >= 1 face-adjacent background neighbor; the
    outside of the array counts as background."""
    mask = _as_bool(mask, "mask")
    if not mask.any():
        return np.zeros_like(mask)
    interior = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1))
    return mask & ~interior


def _directed_distances(src_boundary, dst_boundary, spacing) -> np.ndarray:
    """For every boundary voxel of src: exact distance (mm) to the nearest
    boundary voxel of dst, recomputed in f64 from the nearest index."""
    nearest = ndimage.distance_transform_edt(
        ~dst_boundary, sampling=spacing, return_distances=False, return_indices=True
    )
    src_idx = np.argwhere(src_boundary)
    dst_idx = np.stack([nearest[ax][tuple(src_idx.T)] for ax in range(3)], axis=1)
    delta = (src_idx - dst_idx).astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    return np.sqrt((delta * delta).sum(axis=1))


def hausdorff(pred, truth, spacing=(1.0, 1.0, 1.0), percentile: float = 100.0) -> float | None:
    """Percentile of the pooled two-way boundary distances in mm; 100 gives
    the classic symmetric Hausdorff maximum. None when either mask is empty
    (no boundary to measure)."""
    pred, truth = _check_pair(pred, truth)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise DataError(f"spacing must be 3 positive floats, got {spacing}")
    if not 0 < percentile <= 100:
        raise DataError(f"percentile must be in (0, 100], got {percentile}")
    if not pred.any() or not truth.any():
        return None
    bp, bt = boundary_mask(pred), boundary_mask(truth)
    pooled = np.concatenate(
        [_directed_distances(bp, bt, spacing), _directed_distances(bt, bp, spacing)]
    )
    if percentile == 100:
        return float(pooled.max())
    return float(np.percentile(pooled, percentile))


@dataclass(frozen=True)
class ClassResult:
    dice: float
    sensitivity: float
    specificity: float
    hausdorff_max_mm: float | None
    hausdorff95_mm: float | None
    pred_empty: bool
    truth_empty: bool


@dataclass(frozen=True)
class EvalResult:
    case_id: str
    per_class: dict[str, ClassResult]


def evaluate_masks(pred_channels: np.ndarray, truth_channels: np.ndarray, spacing, case_id="") -> EvalResult:
    """All metrics for stacked [3, D, H, W] binary class masks."""
    results = {}
    for c, name in enumerate(CLASS_NAMES):
        p, t = pred_channels[c], truth_channels[c]
        sens, spec = sensitivity_specificity(p, t)
        results[name] = ClassResult(
            dice=dice_metric(p, t),
            sensitivity=sens,
            specificity=spec,
            hausdorff_max_mm=hausdorff(p, t, spacing, 100),
            hausdorff95_mm=hausdorff(p, t, spacing, 95),
            pred_empty=not p.any(),
            truth_empty=not t.any(),
        )
    return EvalResult(case_id=case_id, per_class=results)


def evaluate_case(pred_labels: Volume, truth_labels: Volume, case_id: str = "") -> EvalResult:
    """Expand two label maps into the nested classes and evaluate each."""
    if pred_labels.extents != truth_labels.extents:
        raise ShapeError(
            f"extents differ: pred {pred_labels.extents} vs truth {truth_labels.extents}"
        )
    if pred_labels.spacing != truth_labels.spacing:
        raise DataError("pred and truth spacing differ")
    pred_ch = labels_to_channels(pred_labels).data.astype(bool)
    truth_ch = labels_to_channels(truth_labels).data.astype(bool)
    return evaluate_masks(pred_ch, truth_ch, truth_labels.spacing, case_id=case_id)
