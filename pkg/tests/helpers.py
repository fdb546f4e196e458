"""Shared fixtures-as-functions for the gradient suite."""

from __future__ import annotations

import numpy as np

from fspnet.gradcheck import check_gradient
from fspnet.tensor import Tensor

GRAD_TOL = 1e-4
TRIALS = 20


def probe(out: Tensor, rng_seed: int) -> Tensor:
    """Contract an output with fixed random weights so every element matters."""
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return (out * Tensor(w)).sum()


def leaf(rng: np.random.Generator, shape, scale: float = 1.0, offset: float = 0.0) -> Tensor:
    return Tensor(offset + scale * rng.standard_normal(shape), requires_grad=True)


def worst_error(fn, x: Tensor, seed: int, indices=None, scale_floor: float = 0.0) -> float:
    return check_gradient(lambda t: probe(fn(t), seed), x, indices=indices, scale_floor=scale_floor)


def sample_indices(rng: np.random.Generator, size: int, k: int):
    return rng.choice(size, size=min(k, size), replace=False)


def rescale_parameters(module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Redraw every parameter at O(1) scale.

    At the real init the graph and head paths pass through several std-0.02
    matrices, so their gradients sit near finite-difference roundoff.
    """
    for _, p in module.named_parameters():
        p.data = scale * rng.standard_normal(p.shape)
