"""Exact-enumeration oracles for the score-function gradient on tiny inputs.

For a sequence of ``n`` positions there are ``2**(n-1)`` boundary masks (the
first bit is forced).  On such inputs the objective

    J(theta) = E_{a ~ pi}[ log p(y | a, x) ]

and its gradient can be computed exactly by summing over every mask, which
gives a ground truth for the single-sample estimator

    g(a) = grad log p(y | a, x) + log p(y | a, x) * grad log pi(a).
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from .model import ARUNet
from .objective import policy_loss, token_logprobs
from .policy import TRAIN


def all_masks(n: int) -> np.ndarray:
    """Every (2**(n-1), n) mask with ``a[0] = 1``."""
    tails = np.array(list(itertools.product((0, 1), repeat=n - 1)), dtype=np.int8).reshape(-1, n - 1)
    return np.concatenate([np.ones((len(tails), 1), dtype=np.int8), tails], axis=1)


def _grads(model: ARUNet) -> dict[str, np.ndarray]:
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for k, p in model.named_parameters()}


def _surrogate_grad(model: ARUNet, ids, targets, mode, mask=None, uniforms=None):
    """Gradient of log p(y|a) + detach(log p(y|a)) * log pi(a) for one mask."""
    model.zero_grad()
    tr = model(ids, mode=mode, mask=mask, uniforms=uniforms)
    logp = token_logprobs(tr.lm_logits, targets).sum()
    reward = logp.item()
    # policy_loss is -sum(logpi * A); with A = -reward it equals +reward * log pi
    surrogate = logp + policy_loss(tr.boundary.logpi, np.full(tr.boundary.logpi.shape, -reward))
    surrogate.backward()
    log_pi = float(tr.boundary.logpi.data.sum())
    return _grads(model), reward, log_pi, tr.boundary.a[0].copy()


def exact_objective(model: ARUNet, ids, targets, mode: str = TRAIN) -> tuple[float, float]:
    """(J, total probability mass) by enumeration; the mass should be 1."""
    ids = np.atleast_2d(ids)
    J = mass = 0.0
    for a in all_masks(ids.shape[1]):
        tr = model(ids, mode=mode, mask=a[None])
        w = math.exp(float(tr.boundary.logpi.data.sum()))
        J += w * token_logprobs(tr.lm_logits, targets).data.sum()
        mass += w
    return J, mass


def exact_gradient(model: ARUNet, ids, targets, mode: str = TRAIN) -> dict[str, np.ndarray]:
    """grad J = sum_a pi(a) * g(a), enumerating every mask."""
    ids = np.atleast_2d(ids)
    total = None
    for a in all_masks(ids.shape[1]):
        g, _, log_pi, _ = _surrogate_grad(model, ids, targets, mode, mask=a[None])
        w = math.exp(log_pi)
        if total is None:
            total = {k: w * v for k, v in g.items()}
        else:
            for k, v in g.items():
                total[k] += w * v
    return total


def sampled_gradient(model: ARUNet, ids, targets, uniforms: np.ndarray, mode: str = TRAIN
                     ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """One single-sample estimate g(a) with a drawn from the policy using ``uniforms``."""
    g, _, _, a = _surrogate_grad(model, np.atleast_2d(ids), targets, mode, uniforms=np.atleast_2d(uniforms))
    return g, a
