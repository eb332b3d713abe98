"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward


def numeric_gradient(fn, arrays, h: float = 1e-5):
    """Central-difference gradient of a scalar function of numpy arrays.

    ``fn`` maps a list of arrays to a float.  Returns one gradient array
    per input, probing every element with step ``h``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = fn(arrays)
            flat[j] = orig - h
            down = fn(arrays)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst absolute deviation scaled by the gradient magnitude.

    The denominator is floored at 1 so near-zero gradients are compared
    absolutely instead of blowing up the ratio.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(1.0, float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def check_gradients(build, arrays, h: float = 1e-5) -> float:
    """Compare reverse-mode and finite-difference gradients of ``build``.

    ``build`` maps a list of Tensors to a scalar Tensor.  Returns the worst
    relative error over all inputs.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    backward(loss)

    def as_scalar(vals):
        return build([Tensor(v) for v in vals]).item()

    numeric = numeric_gradient(as_scalar, arrays, h=h)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(analytic, num))
    return worst
