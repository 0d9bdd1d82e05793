"""Quick-look 2D exports: a grayscale anatomical slice with segmentation
classes painted over it in pure colors, written as binary PPM (P6) so the
output needs no imaging library to produce or parse.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .volume import T1C_CHANNEL, Volume, labels_to_channels

# Spatial axis sliced for each view, in [D, H, W] order.
AXES = {"axial": 0, "sagittal": 2, "coronal": 1}

# Painted in this order, so where classes nest the innermost wins.
CLASS_COLORS = (
    ("WT", (0, 200, 0)),
    ("TC", (220, 0, 0)),
    ("ET", (255, 255, 0)),
)


def _take_slice(data: np.ndarray, axis_name: str, index: int) -> np.ndarray:
    """Extract one 2D plane from a [D, H, W] array."""
    if axis_name not in AXES:
        raise DataError(f"axis must be one of {sorted(AXES)}, got {axis_name!r}")
    axis = AXES[axis_name]
    extent = data.shape[axis]
    if not 0 <= index < extent:
        raise ShapeError(f"{axis_name} index {index} out of range [0, {extent})")
    return np.take(data, index, axis=axis)


def _grayscale(plane: np.ndarray) -> np.ndarray:
    """Min-max scale one plane to uint8; a constant plane maps to mid-gray."""
    plane = plane.astype(np.float64)
    lo, hi = plane.min(), plane.max()
    if hi == lo:
        return np.full(plane.shape, 128, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Write an [H, W, 3] uint8 array as binary PPM."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"PPM data must be [H, W, 3], got {rgb.shape}")
    height, width = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read back a binary PPM written by write_ppm."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise DataError(f"{path}: not a write_ppm-style P6 file")
    width, height = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != height * width * 3:
        raise DataError(f"{path}: pixel payload is {pixels.size} bytes, expected {height * width * 3}")
    return pixels.reshape(height, width, 3)


def render_overlay(image: Volume, labels: Volume, axis: str, index: int) -> np.ndarray:
    """Compose the contrast channel's slice in grayscale with each class's
    mask painted as a pure color (exact replacement, no blending)."""
    if image.extents != labels.extents:
        raise ShapeError(f"image extents {image.extents} != label extents {labels.extents}")
    anatomical = _take_slice(image.data[T1C_CHANNEL], axis, index)
    rgb = np.repeat(_grayscale(anatomical)[:, :, None], 3, axis=2)
    channels = labels_to_channels(labels).data
    for c, (_, color) in enumerate(CLASS_COLORS):
        mask = _take_slice(channels[c], axis, index) > 0
        rgb[mask] = color
    return rgb


def export_slice(image: Volume, labels: Volume, axis: str, index: int, out_path: str | Path) -> None:
    write_ppm(out_path, render_overlay(image, labels, axis, index))
