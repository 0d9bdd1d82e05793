"""Full-volume prediction: normalize, zero-pad to the model's spatial
divisor, run the network without a tape, average an ensemble's
probabilities, threshold, and map back to integer labels on the
original grid.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DataError
from .network import Model, ModelConfig, forward
from .volume import Case, Volume, _pad_to, channels_to_labels, normalize_nonzero


def pad_for_model(data: np.ndarray, config: ModelConfig) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Zero-pad [C,D,H,W] spatial extents up to the next multiple of the
    model's divisor (one factor of 2 per downsampling). Returns the
    padded array and the original extents."""
    divisor = config.spatial_divisor
    original = data.shape[1:]
    target = tuple(-(-e // divisor) * divisor for e in original)
    return _pad_to(data, target), original


def unpad(data: np.ndarray, original: tuple[int, int, int]) -> np.ndarray:
    """Crop [C,D,H,W] back to pre-padding extents (inverse of the
    symmetric pad: the leading margin got the floor half)."""
    slices = [slice(None)]
    for have, want in zip(data.shape[1:], original):
        lead = (have - want) // 2
        slices.append(slice(lead, lead + want))
    return np.ascontiguousarray(data[tuple(slices)])


def predict_probabilities(case: Case, models: list[Model]) -> np.ndarray:
    """Mean of the ensemble's sigmoid outputs, [3,D,H,W] on the case grid."""
    if not models:
        raise DataError("need at least one model to predict")
    image = normalize_nonzero(case.image)
    for model in models:
        if model.config.in_channels != image.channels:
            raise DataError(
                f"case {case.id!r} has {image.channels} channels but the model "
                f"expects {model.config.in_channels}"
            )
    acc = None
    for model in models:
        padded, original = pad_for_model(image.data, model.config)
        with T.no_grad():
            probs = forward(model, T.tensor(padded[None]), training=False).data[0]
        probs = unpad(probs, original)
        acc = probs.astype(np.float64) if acc is None else acc + probs
    return acc / len(models)


def predict_case(case: Case, models: list[Model], threshold: float = 0.5) -> Volume:
    """Thresholded ensemble prediction as a label map on the case grid."""
    probs = predict_probabilities(case, models)
    return channels_to_labels(probs, spacing=case.image.spacing, threshold=threshold)
