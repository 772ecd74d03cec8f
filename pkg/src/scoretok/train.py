"""AdamW + cosine schedule training loop with deterministic resume.

Randomness: boundary draws for batch row ``b`` at optimizer step ``s`` come
from ``np.random.default_rng([seed, s, b])``; data order comes from the
:class:`~scoretok.data.Batcher` seed.  Nothing else is random, so a run is a
pure function of its configs and seeds, and resuming from a checkpoint written
after step ``k`` reproduces the uninterrupted run bit-for-bit.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ByteBatch
from .evaluate import uniform_baseline_mask
from .model import ARUNet, ModelConfig
from .objective import (LossReport, autoregressive_losses, batch_advantages, byte_rewards,
                        discounted_returns, policy_loss, token_logprobs, total_loss)
from .policy import TRAIN
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "bytes_seen", "lr", "L_auto", "L_early", "L_pi", "L_target",
                 "L_total", "bits_per_byte", "mean_p", "rate", "grad_norm"]


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    warmup_bytes: int = 200_000
    training_bytes: int = 8_000_000
    effective_batch_size: int = 16
    micro_batch_size: int = 0          # 0: no accumulation
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    min_lr_ratio: float = 0.1
    grad_clip: float = 0.0             # 0: off; else clip global norm to this value
    seed: int = 0
    checkpoint_every: int = 0
    boundary_mode: str = "learned"     # "learned" | "uniform"

    def __post_init__(self):
        if self.warmup_bytes >= self.training_bytes:
            raise ValueError("warmup_bytes must be smaller than training_bytes")
        if self.boundary_mode not in ("learned", "uniform"):
            raise ValueError(f"boundary_mode must be 'learned' or 'uniform', got {self.boundary_mode!r}")
        if self.micro_batch_size and self.effective_batch_size % self.micro_batch_size:
            raise ValueError("effective_batch_size must be a multiple of micro_batch_size")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_at(bytes_seen: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to ``min_lr_ratio * peak``."""
    peak = cfg.learning_rate
    if bytes_seen < cfg.warmup_bytes:
        return peak * bytes_seen / cfg.warmup_bytes
    floor = cfg.min_lr_ratio * peak
    frac = min(1.0, (bytes_seen - cfg.warmup_bytes) / (cfg.training_bytes - cfg.warmup_bytes))
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Bias-corrected Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> bool:
        """Apply one update; returns False (and changes nothing) on non-finite gradients."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            log.warning("non-finite gradient at optimizer step %d; update skipped", self.t + 1)
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int):
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(tensors[f"adam.v.{k}"], dtype=np.float64)
        self.t = t


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def row_uniforms(seed: int, step: int, rows: range, n: int) -> np.ndarray:
    return np.stack([np.random.default_rng([seed, step, b]).random(n) for b in rows])


@dataclass
class StepResult:
    step: int
    report: LossReport
    grad_norm: float
    lr: float
    applied: bool

    def row(self, bytes_seen: int) -> dict:
        r = {"step": self.step, "bytes_seen": bytes_seen, "lr": self.lr, "grad_norm": self.grad_norm}
        r.update(self.report.as_row())
        return r


class Trainer:
    def __init__(self, model: ARUNet, cfg: TrainConfig, metrics_path=None, checkpoint_dir=None):
        self.model = model
        self.cfg = cfg
        self.params = dict(model.named_parameters())
        self.opt = AdamW(self.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        self.step = 0
        self.bytes_seen = 0
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.history: list[dict] = []

    # -- one optimizer step ----------------------------------------------
    def _mask(self, shape) -> np.ndarray | None:
        if self.cfg.boundary_mode == "uniform":
            return np.broadcast_to(uniform_baseline_mask(shape[1], self.model.cfg.target_rate), shape)
        return None

    def _forward(self, batch: ByteBatch, rows: range):
        x = batch.inputs[rows.start:rows.stop]
        u = row_uniforms(self.cfg.seed, self.step, rows, x.shape[1])
        return self.model(x, mode=TRAIN, uniforms=u, mask=self._mask(x.shape))

    def compute_gradients(self, batch: ByteBatch) -> tuple[LossReport, dict[str, np.ndarray]]:
        """Total-loss gradients for one effective batch.

        With ``micro_batch_size`` set, a first graph-free pass collects returns
        and boundary probabilities over the whole batch so that advantage
        centering and rate pressure see the full batch; a second pass then
        back-propagates one micro-batch at a time.
        """
        mcfg = self.model.cfg
        learn = self.cfg.boundary_mode == "learned"
        B = batch.inputs.shape[0]
        mb = self.cfg.micro_batch_size or B
        chunks = [range(s, min(s + mb, B)) for s in range(0, B, mb)]

        A = None
        pressure = 0.0
        if learn:
            G, p_sum = [], 0.0
            cache = {}
            for rows in chunks:
                tr = self._forward(batch, rows)
                y = batch.targets[rows.start:rows.stop]
                lm = token_logprobs(tr.lm_logits, y).data
                early = token_logprobs(tr.early_logits, y).data
                G.append(discounted_returns(byte_rewards(lm, early), mcfg.gamma)[:, :-1])
                p_sum += float(tr.boundary.p.data.sum())
                if len(chunks) == 1:
                    cache[rows] = tr
            G = np.concatenate(G)
            A = batch_advantages(G) if B > 1 else G
            pressure = p_sum / batch.inputs.size - mcfg.target_rate
        else:
            cache = {}

        self.model.zero_grad()
        sums = dict(L_auto=0.0, L_early=0.0, L_pi=0.0, L_target=0.0, L_total=0.0)
        p_all, a_all = [], []
        n_logits = batch.inputs.size
        for rows in chunks:
            tr = cache.pop(rows, None) or self._forward(batch, rows)
            y = batch.targets[rows.start:rows.stop]
            L_auto, L_early = autoregressive_losses(tr.lm_logits, tr.early_logits, y)
            bt = tr.boundary
            if learn:
                L_pi = policy_loss(bt.logpi, A[rows.start:rows.stop])
                # mean over the *effective* batch, split across micro-batches
                L_target = bt.l.sum() * (pressure / n_logits)
            else:
                L_pi = L_target = L_auto * 0.0
            L = total_loss(L_auto, L_pi, L_target, L_early,
                           mcfg.lambda_pi, mcfg.lambda_target, mcfg.lambda_early)
            L.backward()
            for k, v in (("L_auto", L_auto), ("L_early", L_early), ("L_pi", L_pi),
                         ("L_target", L_target), ("L_total", L)):
                sums[k] += v.item()
            p_all.append(bt.p.data)
            a_all.append(bt.a)

        report = LossReport(
            **{k: Tensor(v) for k, v in sums.items()},
            n_bytes=int(batch.targets.size),
            mean_p=float(np.concatenate(p_all).mean()),
            rate=float(np.concatenate(a_all).mean()),
        )
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        return report, grads

    def train_step(self, batch: ByteBatch) -> StepResult:
        report, grads = self.compute_gradients(batch)
        gnorm = global_norm(grads)
        if self.cfg.grad_clip and gnorm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        lr = lr_at(self.bytes_seen, self.cfg)
        applied = self.opt.step(grads, lr)
        self.step += 1
        self.bytes_seen += int(batch.targets.size)
        return StepResult(self.step, report, gnorm, lr, applied)

    # -- loop --------------------------------------------------------------
    def run(self, data, max_steps: int | None = None,
            callback: Callable[[StepResult], None] | None = None) -> dict:
        """Train until ``training_bytes`` (or ``max_steps`` more steps, or data runs out)."""
        it: Iterator[ByteBatch] = data.iter_from(self.step) if hasattr(data, "iter_from") else iter(data)
        done = 0
        stop_reason = "training_bytes reached"
        writer, fh = self._open_metrics()
        try:
            while self.bytes_seen < self.cfg.training_bytes:
                if max_steps is not None and done >= max_steps:
                    stop_reason = "max_steps reached"
                    break
                try:
                    batch = next(it)
                except StopIteration:
                    stop_reason = "data exhausted"
                    log.warning("data exhausted after %d bytes (< training_bytes=%d)",
                                self.bytes_seen, self.cfg.training_bytes)
                    break
                res = self.train_step(batch)
                row = res.row(self.bytes_seen)
                self.history.append(row)
                if writer:
                    writer.writerow({k: row[k] for k in METRIC_FIELDS})
                    fh.flush()
                if callback:
                    callback(res)
                if self.checkpoint_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(self.checkpoint_dir / f"step{self.step:06d}.ckpt")
                done += 1
        finally:
            if fh:
                fh.close()
        return {"stop_reason": stop_reason, "step": self.step, "bytes_seen": self.bytes_seen}

    def _open_metrics(self):
        if not self.metrics_path:
            return None, None
        new = not self.metrics_path.exists() or self.metrics_path.stat().st_size == 0
        fh = self.metrics_path.open("a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            writer.writeheader()
        return writer, fh

    # -- checkpoints --------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = self.model.state_dict()
        tensors.update({k: v.copy() for k, v in self.opt.state_tensors().items()})
        return Checkpoint(
            tensors=tensors,
            model_config=self.model.cfg.to_dict(),
            train_config=self.cfg.to_dict(),
            counters={"step": self.step, "bytes_seen": self.bytes_seen, "adam_t": self.opt.t},
        )

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, path, train_cfg: TrainConfig | None = None, **kwargs) -> "Trainer":
        ck = load_checkpoint(path)
        model = ARUNet(ModelConfig.from_dict(ck.model_config))
        model.load_state_dict(ck.params())
        tr = cls(model, train_cfg or TrainConfig.from_dict(ck.train_config), **kwargs)
        tr.opt.load_state_tensors(ck.tensors, int(ck.counters["adam_t"]))
        tr.step = int(ck.counters["step"])
        tr.bytes_seen = int(ck.counters["bytes_seen"])
        return tr


def model_from_checkpoint(path) -> ARUNet:
    ck = load_checkpoint(path)
    model = ARUNet(ModelConfig.from_dict(ck.model_config))
    model.load_state_dict(ck.params())
    return model
