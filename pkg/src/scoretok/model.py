"""Autoregressive U-net: byte encoder -> boundary policy -> token backbone -> byte decoder.

Boundary convention: ``a[i] = 1`` means byte ``i`` starts a new token, and
``a[0]`` is always 1.  Byte ``j`` belongs to token ``t(j) = cumsum(a)[j] - 1``;
downsampling keeps the encoder rows at the set bits of ``a`` and upsampling
adds each token's backbone output back onto every byte of its span.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .nn import DecoderLayerConfig, Module, RMSNorm, Stack, init_param
from .policy import TRAIN, BoundaryPolicy, BoundaryTrace
from .tensor import Tensor

BYTE_VOCAB = 256
BOS = 256
PAD = 257
VOCAB_SIZE = 258


@dataclass
class ModelConfig:
    embedding_dim: int = 64
    num_heads: int = 4
    n_down_layers: int = 2
    n_mid_layers: int = 2
    n_up_layers: int = 2
    byte_window: int = 64
    vocab_size: int = VOCAB_SIZE
    seq_len: int = 256
    policy_window: int = 8
    logit_scale: float = 16.0
    target_rate: float = 0.2
    softcap: float = 30.0
    gamma: float = 0.99
    lambda_pi: float = 1e-2
    lambda_target: float = 1e-2
    lambda_early: float = 1e-1
    rope_base: float = 10000.0
    init_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < BYTE_VOCAB + 1:
            raise ValueError(f"vocab_size must be >= 257 (bytes + BOS), got {self.vocab_size}")
        if not 0.0 < self.target_rate < 1.0:
            raise ValueError(f"target_rate must lie in (0, 1), got {self.target_rate}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        for name in ("embedding_dim", "num_heads", "byte_window", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embedding_dim % self.num_heads:
            raise ValueError("embedding_dim must be divisible by num_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ForwardTrace:
    X: Tensor                   # (B, N, d) byte encodings
    boundary: BoundaryTrace
    Xp: Tensor                  # (B, M_max, d) token inputs, rows >= M[b] are padding
    Yp: Tensor                  # (B, M_max, d)
    Y: Tensor                   # (B, N, d)
    lm_logits: Tensor           # (B, N, V); row i predicts byte i+1
    early_logits: Tensor        # (B, N, V)
    token_index: np.ndarray     # (B, N) t(j)
    num_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _check_mask(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValueError("boundary mask must be binary")
    if (a.sum(axis=-1) < 1).any():
        raise ValueError("boundary mask selects no tokens")
    return a.astype(np.int8)


def token_index(a: np.ndarray) -> np.ndarray:
    """t(j) = (number of boundaries at positions <= j) - 1."""
    return np.cumsum(np.asarray(a, dtype=np.int64), axis=-1) - 1


def boundary_positions(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Padded (..., M_max) positions of set bits (ascending) and per-row counts."""
    a = _check_mask(a)
    lead = a.shape[:-1]
    flat = a.reshape(-1, a.shape[-1])
    counts = flat.sum(axis=-1)
    m_max = int(counts.max())
    pos = np.zeros((flat.shape[0], m_max), dtype=np.int64)
    for r, row in enumerate(flat):
        nz = np.flatnonzero(row)
        pos[r, : len(nz)] = nz
        pos[r, len(nz):] = nz[-1]
    return pos.reshape(lead + (m_max,)), counts.reshape(lead)


def downsample(X: Tensor, a: np.ndarray) -> Tensor:
    """Rows of ``X`` at the set bits of ``a``; works on (N, d) or (B, N, d)."""
    a = _check_mask(a)
    if a.shape != X.shape[:-1]:
        raise ValueError(f"mask shape {a.shape} does not match X {X.shape}")
    pos, _ = boundary_positions(a)
    return T.gather(X, pos, axis=X.ndim - 2)


def upsample(Yp: Tensor, X: Tensor, a: np.ndarray) -> Tensor:
    """``X[j] + Yp[t(j)]`` for every byte ``j``."""
    a = _check_mask(a)
    if a.shape != X.shape[:-1]:
        raise ValueError(f"mask shape {a.shape} does not match X {X.shape}")
    t = token_index(a)
    if t.max() >= Yp.shape[-2]:
        raise ValueError(f"mask has {t.max() + 1} tokens but Y' has {Yp.shape[-2]} rows")
    return X + T.gather(Yp, t, axis=Yp.ndim - 2)


class Head(Module):
    def __init__(self, d: int, vocab: int, cap: float, rng: np.random.Generator):
        self.norm = RMSNorm(d)
        self.w = init_param(rng, (d, vocab), d ** -0.5)
        self.cap = cap

    def __call__(self, x: Tensor) -> Tensor:
        return T.softcap(self.norm(x) @ self.w, self.cap)


class ARUNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        d, h = cfg.embedding_dim, cfg.num_heads
        byte_cfg = DecoderLayerConfig.byte_level(d, h, cfg.byte_window, cfg.rope_base)
        tok_cfg = DecoderLayerConfig.token_level(d, h, cfg.rope_base)
        self.embed = init_param(rng, (cfg.vocab_size, d), 1.0)
        self.encoder = Stack(byte_cfg, cfg.n_down_layers, rng)
        self.policy = BoundaryPolicy(d, cfg.policy_window, cfg.logit_scale, cfg.target_rate, cfg.softcap)
        self.backbone = Stack(tok_cfg, cfg.n_mid_layers, rng)
        self.decoder = Stack(byte_cfg, cfg.n_up_layers, rng)
        self.head = Head(d, cfg.vocab_size, cfg.softcap, rng)
        self.early_head = Head(d, cfg.vocab_size, cfg.softcap, rng)
        self.early_head.w.data[...] = self.head.w.data
        self.early_head.norm.gain.data[...] = self.head.norm.gain.data

    # -- stages -----------------------------------------------------------
    def encode(self, ids: np.ndarray) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids))
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"byte ids must lie in [0, {self.cfg.vocab_size})")
        return self.encoder(T.embedding(self.embed, ids))

    def mid(self, Xp: Tensor) -> Tensor:
        return self.backbone(Xp)

    def decode(self, Y: Tensor) -> Tensor:
        return self.head(self.decoder(Y))

    def early_exit_logits(self, X: Tensor) -> Tensor:
        return self.early_head(X)

    def boundaries(self, X: Tensor, uniforms=None, mode: str = TRAIN, mask=None,
                   threshold: float | None = None) -> BoundaryTrace:
        return self.policy(X, uniforms=uniforms, mode=mode, mask=mask, threshold=threshold)

    def forward(self, ids: np.ndarray, mode: str = TRAIN, uniforms: np.ndarray | None = None,
                rng: np.random.Generator | None = None, mask: np.ndarray | None = None,
                threshold: float | None = None) -> ForwardTrace:
        """Full pass over ``ids`` (B, N) with BOS at column 0.

        Boundaries come from ``mask`` when given, else from ``threshold``, else
        are sampled with ``uniforms`` (or fresh draws from ``rng``).
        """
        ids = np.atleast_2d(np.asarray(ids))
        X = self.encode(ids)
        if mask is None and threshold is None and uniforms is None:
            rng = rng if rng is not None else np.random.default_rng()
            uniforms = rng.random(ids.shape)
        if mask is not None:
            mask = np.broadcast_to(_check_mask(mask), ids.shape)
        bt = self.boundaries(X, uniforms=uniforms, mode=mode, mask=mask, threshold=threshold)
        a = bt.a
        Xp = downsample(X, a)
        Yp = self.mid(Xp)
        Y = upsample(Yp, X, a)
        return ForwardTrace(
            X=X, boundary=bt, Xp=Xp, Yp=Yp, Y=Y,
            lm_logits=self.decode(Y), early_logits=self.early_exit_logits(X),
            token_index=token_index(a), num_tokens=a.sum(axis=-1),
        )

    __call__ = forward

    # -- parameter helpers ------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr
