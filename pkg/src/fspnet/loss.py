"""Deep-supervision objective over the four lateral predictions."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .functional import bce
from .tensor import ShapeError, Tensor, as_tensor

# shallow layers get 2^(i-4); the last layer weight is 1
LAYER_WEIGHTS = (2.0**-4, 2.0**-3, 2.0**-2, 1.0)


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    """Threshold anti-aliased masks at 0.5."""
    return (np.asarray(mask, dtype=np.float64) >= 0.5).astype(np.float64)


def total_loss(predictions: Sequence[Tensor], ground_truth) -> Tensor:
    """Weighted sum of per-layer BCE terms for (P0, P1, P2, P3)."""
    if len(predictions) != len(LAYER_WEIGHTS):
        raise ShapeError(f"expected 4 lateral predictions, got {len(predictions)}")
    g = as_tensor(ground_truth)
    if not np.all((g.data == 0.0) | (g.data == 1.0)):
        raise ValueError("ground truth must be strictly binary")
    for p in predictions:
        if p.shape != g.shape:
            raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    loss = None
    for w, p in zip(LAYER_WEIGHTS, predictions):
        term = bce(p, g) * w
        loss = term if loss is None else loss + term
    return loss
