"""Volumes, cases, label-set encoding, preprocessing, and augmentation.

A Volume is channel-major float32 voxel data [C, D, H, W] with per-axis
spacing in millimetres. Label maps use the raw values {0, 1, 2, 4}; the
network trains against three nested binary channels derived from them:

    channel 0, WT (whole tumor)     = {1, 2, 4}
    channel 1, TC (tumor core)      = {1, 4}
    channel 2, ET (enhancing tumor) = {4}

Intensity preprocessing treats exact-zero voxels as background (the product
of skull-stripping) and leaves them untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, ShapeError

VOLUME_KINDS = ("image", "label_map", "channel_mask")
LABEL_VALUES = (0, 1, 2, 4)

# (channel index, member label values) in fixed channel order.
CLASS_NAMES = ("WT", "TC", "ET")
CLASS_LABELS = ((1, 2, 4), (1, 4), (4,))

MODALITIES = ("t1", "t1ce", "t2", "flair")
T1C_CHANNEL = 1


@dataclass
class Volume:
    """Voxel data [C, D, H, W] plus spacing (mm per axis, (D, H, W) order)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeError(f"Volume data must be [C,D,H,W], got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be 3 positive floats, got {self.spacing}")
        if self.kind not in VOLUME_KINDS:
            raise DataError(f"unknown volume kind {self.kind!r}")
        if self.kind == "label_map":
            if self.data.shape[0] != 1:
                raise ShapeError("label_map volumes have exactly 1 channel")
            bad = np.setdiff1d(np.unique(self.data), np.array(LABEL_VALUES, dtype=np.float32))
            if bad.size:
                raise DataError(f"label_map contains values outside {LABEL_VALUES}: {bad.tolist()}")
        elif self.kind == "channel_mask":
            if not np.isin(self.data, (0.0, 1.0)).all():
                raise DataError("channel_mask volumes must be binary")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class Case:
    """One subject: a 4-channel image and (for training data) its label map."""

    id: str
    image: Volume
    label: Volume | None = None

    def __post_init__(self):
        if self.label is not None:
            if self.label.extents != self.image.extents:
                raise ShapeError(
                    f"case {self.id!r}: label extents {self.label.extents} "
                    f"!= image extents {self.image.extents}"
                )
            if self.label.spacing != self.image.spacing:
                raise DataError(f"case {self.id!r}: label and image spacing differ")


def normalize_nonzero(volume: Volume) -> Volume:
    """Standardize each channel to zero mean / unit std over its nonzero
    voxels; exact-zero background voxels stay exactly zero."""
    out = volume.data.copy()
    for c in range(volume.channels):
        ch = out[c]
        mask = ch != 0.0
        n = int(mask.sum())
        if n < 2:
            raise DataError(f"channel {c}: need >= 2 nonzero voxels to normalize, got {n}")
        vals = ch[mask].astype(np.float64)
        mu = vals.mean()
        sigma = vals.std()
        if sigma == 0.0:
            raise DataError(f"channel {c}: constant nonzero region, std is 0")
        ch[mask] = ((vals - mu) / sigma).astype(np.float32)
    return replace(volume, data=out)


def labels_to_channels(label: Volume) -> Volume:
    """Expand a raw label map into the three nested binary target channels."""
    if label.kind != "label_map":
        raise DataError(f"labels_to_channels expects a label_map, got {label.kind!r}")
    lab = label.data[0]
    masks = np.zeros((len(CLASS_LABELS),) + lab.shape, dtype=np.float32)
    for c, members in enumerate(CLASS_LABELS):
        masks[c] = np.isin(lab, np.array(members, dtype=np.float32)).astype(np.float32)
    return Volume(masks, spacing=label.spacing, kind="channel_mask")


def channels_to_labels(probs: np.ndarray, spacing=(1.0, 1.0, 1.0), threshold: float = 0.5) -> Volume:
    """Invert labels_to_channels on thresholded probabilities [3, D, H, W].

    Nesting priority per voxel: ET wins (4), then TC (1), then WT (2)."""
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[0] != len(CLASS_LABELS):
        raise ShapeError(f"expected [3,D,H,W] probabilities, got {probs.shape}")
    wt, tc, et = (probs[c] >= threshold for c in range(3))
    lab = np.zeros(probs.shape[1:], dtype=np.float32)
    lab[wt] = 2.0
    lab[tc] = 1.0
    lab[et] = 4.0
    return Volume(lab[None], spacing=spacing, kind="label_map")


def _pad_to(data: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Zero-pad the spatial axes symmetrically up to target extents (odd
    remainders put the extra voxel at the trailing side)."""
    pads = [(0, 0)]
    for have, want in zip(data.shape[1:], target):
        total = max(0, want - have)
        pads.append((total // 2, total - total // 2))
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads)
    return data


def random_crop(case: Case, crop: tuple[int, int, int], rng: np.random.Generator) -> Case:
    """Crop a uniformly random window of the given extents from image and
    label together, zero-padding first if the volume is smaller."""
    crop = tuple(int(c) for c in crop)
    if len(crop) != 3 or any(c < 1 for c in crop):
        raise ShapeError(f"crop extents must be 3 positive ints, got {crop}")
    img = _pad_to(case.image.data, crop)
    lab = _pad_to(case.label.data, crop) if case.label is not None else None
    offsets = tuple(int(rng.integers(0, img.shape[1 + ax] - crop[ax] + 1)) for ax in range(3))
    window = (slice(None),) + tuple(slice(o, o + c) for o, c in zip(offsets, crop))
    image = Volume(img[window].copy(), spacing=case.image.spacing, kind=case.image.kind)
    label = None
    if lab is not None:
        label = Volume(lab[window].copy(), spacing=case.label.spacing, kind=case.label.kind)
    return Case(id=case.id, image=image, label=label)


def augment(case: Case, rng: np.random.Generator) -> Case:
    """Training-time augmentation: per-channel intensity scale U(0.9, 1.1)
    and shift U(-0.1, 0.1) of the channel's nonzero std (applied to nonzero
    voxels, preserving the zero background), then an independent p=0.5
    mirror flip per spatial axis applied to image and label together.

    Draw order is fixed — (scale, shift) per channel, then one flip draw per
    axis — so a given rng stream always produces the same augmentation."""
    img = case.image.data.copy()
    for c in range(img.shape[0]):
        scale = rng.uniform(0.9, 1.1)
        shift = rng.uniform(-0.1, 0.1)
        ch = img[c]
        mask = ch != 0.0
        std = ch[mask].std() if mask.any() else 0.0
        ch[mask] = ch[mask] * scale + shift * std
    lab = case.label.data.copy() if case.label is not None else None
    for ax in range(3):
        if rng.random() < 0.5:
            img = np.flip(img, axis=1 + ax)
            if lab is not None:
                lab = np.flip(lab, axis=1 + ax)
    image = Volume(np.ascontiguousarray(img), spacing=case.image.spacing, kind="image")
    label = None
    if lab is not None:
        label = Volume(np.ascontiguousarray(lab), spacing=case.label.spacing, kind=case.label.kind)
    return Case(id=case.id, image=image, label=label)
