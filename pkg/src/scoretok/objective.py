"""Score-function objective: rewards, discounted returns, advantages and losses.

Indexing: ``lm_logits[:, i]`` predicts byte ``i+1`` of the input row, so the
reward of predicting byte ``k`` is ``R[k] = lm_lp[k-1] - early_lp[k-1]`` for
``k = 1..N`` (``R[0] = 0``; BOS is never predicted).  The return credited to
the decision at byte ``i`` only sums strictly later rewards,
``G[i] = sum_j gamma^j R[i+j+1]``, i.e. exactly the predictions that can see
``a[i]``.  All reward-side arrays are plain numpy: they never enter the graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN2 = math.log(2.0)


@dataclass
class RewardTrace:
    R: np.ndarray      # (B, N+1) rewards per predicted byte, nats
    G: np.ndarray      # (B, N) discounted returns for a[:, 0..N-1]
    G_bar: np.ndarray  # (N,)
    A: np.ndarray      # (B, N)


@dataclass
class LossReport:
    L_auto: Tensor
    L_early: Tensor
    L_pi: Tensor
    L_target: Tensor
    L_total: Tensor
    n_bytes: int
    mean_p: float
    rate: float

    @property
    def bits_per_byte(self) -> float:
        return self.L_auto.item() / self.n_bytes / LN2

    def as_row(self) -> dict[str, float]:
        return {
            "L_auto": self.L_auto.item(), "L_early": self.L_early.item(),
            "L_pi": self.L_pi.item(), "L_target": self.L_target.item(),
            "L_total": self.L_total.item(), "bits_per_byte": self.bits_per_byte,
            "mean_p": self.mean_p, "rate": self.rate,
        }


def token_logprobs(logits: Tensor, targets: np.ndarray) -> Tensor:
    """log softmax(logits)[target] at every position; shape = targets.shape."""
    targets = np.asarray(targets)
    lp = T.log_softmax(logits, axis=-1)
    picked = T.gather(lp, targets[..., None], axis=lp.ndim - 1)
    return picked.reshape(targets.shape)


def rewards(lm_logprobs, early_logprobs) -> np.ndarray:
    lm = np.asarray(lm_logprobs.data if isinstance(lm_logprobs, Tensor) else lm_logprobs)
    early = np.asarray(early_logprobs.data if isinstance(early_logprobs, Tensor) else early_logprobs)
    if lm.shape != early.shape:
        raise ValueError(f"reward inputs differ in shape: {lm.shape} vs {early.shape}")
    return lm - early


def byte_rewards(lm_logprobs, early_logprobs) -> np.ndarray:
    """Rewards re-indexed by predicted byte: (..., N) -> (..., N+1) with R[..., 0] = 0."""
    r = rewards(lm_logprobs, early_logprobs)
    pad = np.zeros(r.shape[:-1] + (1,))
    return np.concatenate([pad, r], axis=-1)


def discounted_returns(R, gamma: float) -> np.ndarray:
    """G[i] = sum_{j>=0} gamma^j R[i+j+1]; the last position gets 0."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    R = np.asarray(R, dtype=np.float64)
    G = np.zeros_like(R)
    for i in range(R.shape[-1] - 2, -1, -1):
        G[..., i] = R[..., i + 1] + gamma * G[..., i + 1]
    return G


def batch_advantages(G, leave_one_out: bool = False) -> np.ndarray:
    """Center returns across the batch axis (axis 0) per position.

    ``leave_one_out`` subtracts the mean of the *other* rows instead, which
    keeps the estimator exactly unbiased at the cost of a ``B/(B-1)`` scale.
    """
    G = np.asarray(G, dtype=np.float64)
    B = G.shape[0]
    if B < 2:
        raise ValueError("batch-relative advantages need a batch of at least 2 sequences")
    mean = G.mean(axis=0, keepdims=True)
    if leave_one_out:
        return (G - mean) * (B / (B - 1))
    return G - mean


def policy_loss(logpi: Tensor, A) -> Tensor:
    """-sum logpi * A with A a constant; position 0 of logpi is already zeroed."""
    if isinstance(A, Tensor) and A.requires_grad:
        raise TypeError("advantages must be detached before entering the policy loss")
    A = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    return -(logpi * A).sum()


def target_loss(l: Tensor, p: Tensor, target_rate: float) -> Tensor:
    """mean(l) * detach(mean(p) - target): uniform push on every logit."""
    pressure = float(p.data.mean()) - target_rate
    return l.mean() * pressure


def autoregressive_losses(lm_logits: Tensor, early_logits: Tensor, targets) -> tuple[Tensor, Tensor]:
    L_auto = -token_logprobs(lm_logits, targets).sum()
    L_early = -token_logprobs(early_logits, targets).sum()
    return L_auto, L_early


def total_loss(L_auto, L_pi, L_target, L_early, lambda_pi: float, lambda_target: float,
               lambda_early: float) -> Tensor:
    return L_auto + lambda_pi * L_pi + lambda_target * L_target + lambda_early * L_early


def bits_per_byte(total_nats: float, n_bytes: int) -> float:
    return total_nats / n_bytes / LN2


def reward_trace(lm_lp, early_lp, gamma: float, use_baseline: bool = True,
                 center: bool = True, leave_one_out: bool = False) -> RewardTrace:
    lm = lm_lp.data if isinstance(lm_lp, Tensor) else np.asarray(lm_lp)
    early = early_lp.data if isinstance(early_lp, Tensor) else np.asarray(early_lp)
    R = byte_rewards(lm, early if use_baseline else np.zeros_like(early))
    G = discounted_returns(R, gamma)[..., :-1]
    if center:
        A = batch_advantages(G, leave_one_out)
        G_bar = G.mean(axis=0)
    else:
        A, G_bar = G, np.zeros(G.shape[-1])
    return RewardTrace(R=R, G=G, G_bar=G_bar, A=A)


def compute_losses(trace, targets, cfg, learn_boundaries: bool = True
                   ) -> tuple[LossReport, RewardTrace | None]:
    """All loss terms of one batch from a :class:`ForwardTrace`."""
    targets = np.asarray(targets)
    lm_lp = token_logprobs(trace.lm_logits, targets)
    early_lp = token_logprobs(trace.early_logits, targets)
    L_auto, L_early = -lm_lp.sum(), -early_lp.sum()
    bt = trace.boundary
    zero = T.Tensor(0.0)
    rt = None
    if learn_boundaries:
        rt = reward_trace(lm_lp, early_lp, cfg.gamma, center=targets.shape[0] > 1)
        L_pi = policy_loss(bt.logpi, rt.A)
        L_target = target_loss(bt.l, bt.p, cfg.target_rate)
    else:
        L_pi, L_target = zero, zero
    L = total_loss(L_auto, L_pi, L_target, L_early, cfg.lambda_pi, cfg.lambda_target, cfg.lambda_early)
    report = LossReport(
        L_auto=L_auto, L_early=L_early, L_pi=L_pi, L_target=L_target, L_total=L,
        n_bytes=int(targets.size), mean_p=float(bt.p.data.mean()),
        rate=float(bt.a.mean()),
    )
    return report, rt
