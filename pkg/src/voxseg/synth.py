"""Synthetic nested-region cases for desk-scale training and testing.

Each case is a "head" ellipsoid of nonzero tissue on an exactly-zero
background, containing three nested tumor ellipsoids written as raw labels:
WT rim -> 2 (edema), TC rim -> 1 (necrotic core), innermost ET -> 4. The
four image channels give each region a distinct intensity signature (loosely
modeled on T1/T1c/T2/FLAIR contrast), corrupted by Gaussian noise and a
smooth multiplicative bias field so the mapping is learnable but not a
lookup table.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .volume import Case, Volume

# Per-channel additive offsets for (healthy tissue, edema, core, enhancing),
# echoing how the real modalities light up: edema bright on T2/FLAIR, the
# enhancing rim bright on T1c, core dark on T1.
_BASE = (0.65, 0.60, 0.70, 0.55)
_OFFSETS = {
    "edema": (0.05, 0.00, 0.45, 0.55),
    "core": (-0.25, -0.15, 0.25, 0.30),
    "enhancing": (0.10, 0.75, 0.30, 0.35),
}
_MIN_REGION_VOXELS = 8
_MAX_ATTEMPTS = 200


def _ellipsoid(shape, center, semi_axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, a in zip(grids, center, semi_axes):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _sample_masks(shape, rng):
    """Head mask plus nested WT/TC/ET masks; None when degenerate."""
    half = np.array(shape) / 2.0
    head = _ellipsoid(shape, half, 0.92 * half)

    wt_center = half + rng.uniform(-0.10, 0.10, size=3) * half
    wt_axes = rng.uniform(0.26, 0.64, size=3) * half
    wt = _ellipsoid(shape, wt_center, wt_axes) & head

    tc_center = wt_center + rng.uniform(-0.15, 0.15, size=3) * wt_axes
    tc_axes = rng.uniform(0.55, 0.80, size=3) * wt_axes
    tc = _ellipsoid(shape, tc_center, tc_axes) & wt

    et_center = tc_center + rng.uniform(-0.15, 0.15, size=3) * tc_axes
    et_axes = rng.uniform(0.45, 0.75, size=3) * tc_axes
    et = _ellipsoid(shape, et_center, et_axes) & tc

    wt_fraction = wt.sum() / wt.size
    if not 0.005 < wt_fraction < 0.20:
        return None
    if min(m.sum() for m in ((wt & ~tc), (tc & ~et), et)) < _MIN_REGION_VOXELS:
        return None
    return head, wt, tc, et


def _bias_field(shape, rng, amplitude) -> np.ndarray:
    """Smooth multiplicative field: 1 + a low-order polynomial in the
    normalized coordinates, coefficients drawn once per case."""
    coords = [np.linspace(-1.0, 1.0, n) for n in shape]
    z, y, x = np.meshgrid(*coords, indexing="ij")
    c = rng.uniform(-1.0, 1.0, size=9)
    poly = (
        c[0] * z + c[1] * y + c[2] * x
        + c[3] * z * y + c[4] * y * x + c[5] * z * x
        + c[6] * z * z + c[7] * y * y + c[8] * x * x
    )
    return 1.0 + amplitude * poly


def synth_case(
    extents,
    rng: np.random.Generator,
    spacing=(1.0, 1.0, 1.0),
    difficulty: float = 1.0,
    case_id: str = "synth",
) -> Case:
    shape = tuple(int(e) for e in extents)
    if len(shape) != 3 or any(e < 16 for e in shape):
        raise DataError(f"synthetic extents must be >= 16 per axis, got {shape}")
    if not 0.0 <= difficulty:
        raise DataError(f"difficulty must be >= 0, got {difficulty}")

    masks = None
    for _ in range(_MAX_ATTEMPTS):
        masks = _sample_masks(shape, rng)
        if masks is not None:
            break
    if masks is None:
        raise DataError(f"could not draw a non-degenerate case in {_MAX_ATTEMPTS} attempts")
    head, wt, tc, et = masks

    label = np.zeros(shape, dtype=np.float32)
    label[wt] = 2.0
    label[tc] = 1.0
    label[et] = 4.0

    noise_sigma = 0.03 + 0.05 * difficulty
    bias_amp = 0.08 * difficulty
    image = np.zeros((4,) + shape, dtype=np.float64)
    for c in range(4):
        ch = np.zeros(shape, dtype=np.float64)
        ch[head] = _BASE[c]
        ch[wt & ~tc] += _OFFSETS["edema"][c]
        ch[tc & ~et] += _OFFSETS["core"][c]
        ch[et] += _OFFSETS["enhancing"][c]
        ch *= _bias_field(shape, rng, bias_amp)
        ch[head] += rng.normal(0.0, noise_sigma, size=int(head.sum()))
        ch[~head] = 0.0
        image[c] = ch

    return Case(
        id=case_id,
        image=Volume(image.astype(np.float32), spacing=spacing, kind="image"),
        label=Volume(label[None], spacing=spacing, kind="label_map"),
    )
