"""Central finite-difference gradient checks against the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                 coords: Sequence[int] | None = None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    With ``coords`` only those flat indices are evaluated (others left 0).
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-3) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor_frac * max|n|).

    The floor keeps entries that are tiny relative to the gradient's scale from
    turning round-off into huge relative errors.
    """
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    scale = max(float(np.abs(n).max()), float(np.abs(a).max()))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor_frac * scale)
    return float((np.abs(a - n) / denom).max())


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None
                    ) -> list[float]:
    """Relative error per parameter between backprop and finite differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar Tensor.  ``max_coords`` subsamples coordinates of large
    parameters (the error is then taken over the sampled ones).
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errs = []
    for p, a in zip(params, analytic):
        coords = None
        if max_coords is not None and p.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        num = numeric_grad(lambda: loss_fn().item(), p.data, h, coords)
        if coords is not None:
            errs.append(relative_error(a.ravel()[coords], num.ravel()[coords]))
        else:
            errs.append(relative_error(a, num))
    return errs
