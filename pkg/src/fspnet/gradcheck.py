"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, no_grad


def check_gradient(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
    scale_floor: float = 0.0,
) -> float:
    """Return the max relative error between backprop and central differences.

    ``f`` is called with ``x`` itself; ``x.data`` is perturbed in place (and
    restored), so ``x`` may be a model parameter that ``f`` closes over.
    The relative error of a coordinate is |a - n| / max(|a|, |n|, 1e-8).
    ``indices`` restricts the comparison to a subset of flat coordinates.
    ``scale_floor`` raises the denominator floor to that fraction of the
    largest analytic gradient, for deep graphs where a few coordinates sit
    at the finite-difference roundoff level.
    """
    if not x.requires_grad:
        raise ValueError("check_gradient: x must require gradients")
    saved_grad = x.grad
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"check_gradient: f must return a scalar, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = saved_grad

    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    coords = range(x.size) if indices is None else indices
    floor = max(1e-8, scale_floor * float(np.abs(analytic).max(initial=0.0)))
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data)
            flat[i] = orig - step
            fm = float(f(x).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
