"""Finite-difference verification of reverse-mode gradients."""

import numpy as np

from .tensor import Tensor, backward


def check_gradients(func, point, step=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``func`` maps a Tensor to a scalar Tensor and must be evaluable at
    perturbed copies of ``point``. The relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    point = np.asarray(point, dtype=np.float64)
    leaf = Tensor(point.copy(), requires_grad=True)
    out = func(leaf)
    if out.size != 1:
        raise ValueError("func must return a scalar")
    backward(out)
    analytic = np.zeros_like(point) if leaf.grad is None else leaf.grad

    flat = point.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn, slot in ((1.0, 0), (-1.0, 1)):
            p = flat.copy()
            p[i] += sgn * step
            val = func(Tensor(p.reshape(point.shape))).item()
            numeric[i] += val if slot == 0 else -val
        numeric[i] /= 2.0 * step
    numeric = numeric.reshape(point.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
