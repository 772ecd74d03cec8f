"""Stochastic token-boundary policy.

The boundary logit at byte ``i`` is a linear read-out of the encoder state
plus one extra read-out per earlier boundary inside a window of ``w`` bytes:

    l_raw[i]    = W_0 X_i + sum_{j=1..w} a[i-j] * W_j X_i
    l_scaled[i] = l_raw[i] / D + logit(target_rate)
    l[i]        = softcap(l_scaled[i])      (train mode; eval mode skips the cap)
    a[i]        ~ Bernoulli(sigmoid(l[i])), a[0] forced to 1

All ``W_j X_i`` are produced by one matmul into an ``(..., N, w+1)`` array.  The
sampling scan over ``i`` runs on plain arrays (``a[i]`` must be drawn before
``l[i+1]`` is known); once the mask is fixed the logits are rebuilt on the
autodiff graph with the window indicators as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor

TRAIN, EVAL = "train", "eval"


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"target rate must lie in (0, 1), got {p}")
    return math.log(p / (1.0 - p))


@dataclass
class BoundaryTrace:
    a: np.ndarray          # (B, N) int8 decisions, a[:, 0] == 1
    l_raw: Tensor
    l_scaled: Tensor
    l: Tensor
    p: Tensor
    logpi: Tensor          # (B, N); column 0 is exactly 0

    @property
    def num_tokens(self) -> np.ndarray:
        return self.a.sum(axis=-1)


def window_indicators(a: np.ndarray, w: int) -> np.ndarray:
    """``out[..., i, 0] = 1`` and ``out[..., i, j] = a[..., i-j]`` (0 when i-j < 0)."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    out = np.zeros(a.shape + (w + 1,))
    out[..., 0] = 1.0
    for j in range(1, min(w, n - 1) + 1):
        out[..., j:, j] = a[..., : n - j]
    return out


def raw_logits(proj: Tensor, a: np.ndarray) -> Tensor:
    """Window-conditioned raw logits for a fixed mask; ``proj`` is (..., N, w+1)."""
    w = proj.shape[-1] - 1
    return (proj * window_indicators(a, w)).sum(axis=-1)


def scale_and_shift(l_raw, scale: float, target_rate: float):
    shift = logit(target_rate)
    if isinstance(l_raw, Tensor):
        return l_raw * (1.0 / scale) + shift
    return np.asarray(l_raw) / scale + shift


def eval_logits(l_scaled):
    return l_scaled


def _finish(l_scaled, cap: float, mode: str):
    if mode == TRAIN:
        return cap * np.tanh(l_scaled / cap)
    return l_scaled


def scan_sample(proj: np.ndarray, uniforms: np.ndarray | None, scale: float, target_rate: float,
                cap: float, mode: str = TRAIN, threshold: float | None = None) -> np.ndarray:
    """Sequentially draw the boundary mask from precomputed projections.

    ``uniforms`` (same leading shape as the mask) drive Bernoulli draws via
    ``a = u < p``.  With ``threshold`` set, draws are replaced by ``p > threshold``.
    """
    proj = np.asarray(proj)
    *lead, n, w1 = proj.shape
    w = w1 - 1
    a = np.zeros(tuple(lead) + (n,), dtype=np.int8)
    shift = logit(target_rate)
    for i in range(n):
        lo = max(0, i - w)
        hist = a[..., lo:i][..., ::-1].astype(np.float64)
        l_raw = proj[..., i, 0] + (hist * proj[..., i, 1:1 + (i - lo)]).sum(axis=-1)
        l = _finish(l_raw / scale + shift, cap, mode)
        if not np.all(np.isfinite(l)):
            raise FloatingPointError(f"non-finite boundary logit at position {i}")
        if i == 0:
            a[..., 0] = 1
            continue
        p = T._sigmoid(l)
        if threshold is not None:
            a[..., i] = p > threshold
        else:
            a[..., i] = uniforms[..., i] < p
    return a


def trace_for_mask(proj: Tensor, a: np.ndarray, scale: float, target_rate: float,
                   cap: float, mode: str = TRAIN) -> BoundaryTrace:
    """Build logits, probabilities and log pi(a) on the graph for a fixed mask."""
    a = np.asarray(a, dtype=np.int8)
    if a.shape != proj.shape[:-1]:
        raise ValueError(f"mask shape {a.shape} does not match projections {proj.shape}")
    if not np.all(a[..., 0] == 1):
        raise ValueError("position 0 must always be a boundary")
    l_raw = raw_logits(proj, a)
    l_scaled = scale_and_shift(l_raw, scale, target_rate)
    l = T.softcap(l_scaled, cap) if mode == TRAIN else eval_logits(l_scaled)
    p = T.sigmoid(l)
    af = a.astype(np.float64)
    logpi = af * T.log_sigmoid(l) + (1.0 - af) * T.log_sigmoid(-l)
    keep = np.ones(a.shape)
    keep[..., 0] = 0.0
    return BoundaryTrace(a=a, l_raw=l_raw, l_scaled=l_scaled, l=l, p=p, logpi=logpi * keep)


def sample_boundaries(proj: Tensor, uniforms: np.ndarray | None, scale: float, target_rate: float,
                      cap: float, mode: str = TRAIN, threshold: float | None = None) -> BoundaryTrace:
    a = scan_sample(proj.data, uniforms, scale, target_rate, cap, mode, threshold)
    return trace_for_mask(proj, a, scale, target_rate, cap, mode)


class BoundaryPolicy(Module):
    """Projections ``W_0..W_w`` stored as one (d, w+1) matrix, zero-initialised."""

    def __init__(self, d: int, window: int = 8, scale: float = 16.0, target_rate: float = 0.2,
                 cap: float = 30.0):
        if window < 0:
            raise ValueError(f"policy window must be >= 0, got {window}")
        logit(target_rate)
        self.w = Tensor(np.zeros((d, window + 1)), requires_grad=True)
        self.window, self.scale, self.target_rate, self.cap = window, scale, target_rate, cap

    def project(self, x: Tensor) -> Tensor:
        return x @ self.w

    def __call__(self, x: Tensor, uniforms=None, mode: str = TRAIN, mask=None,
                 threshold: float | None = None) -> BoundaryTrace:
        proj = self.project(x)
        if mask is not None:
            return trace_for_mask(proj, mask, self.scale, self.target_rate, self.cap, mode)
        return sample_boundaries(proj, uniforms, self.scale, self.target_rate, self.cap,
                                 mode, threshold)
