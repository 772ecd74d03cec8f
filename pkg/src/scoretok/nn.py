"""Gemma-2 style decoder building blocks on top of :mod:`scoretok.tensor`.

Shapes are batched: activations are ``(B, N, d)``.  Linear projections carry
no bias and RMSNorm has a multiplicative gain only, so a zero input maps to a
zero output through every block.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, _make

FULL = "full"


class Module:
    """Parameter container: walks Tensor / Module / list attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def init_param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


@dataclass(frozen=True)
class DecoderLayerConfig:
    embedding_dim: int
    num_heads: int
    mlp_hidden: int
    attention_window: int | str = FULL
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.embedding_dim % self.num_heads:
            raise ValueError(
                f"embedding_dim {self.embedding_dim} not divisible by num_heads {self.num_heads}")
        if self.attention_window != FULL and int(self.attention_window) < 1:
            raise ValueError(f"attention window must be >= 1 or 'full', got {self.attention_window}")

    @classmethod
    def byte_level(cls, d: int, heads: int, window, rope_base: float = 10000.0):
        return cls(d, heads, d, window, rope_base)

    @classmethod
    def token_level(cls, d: int, heads: int, rope_base: float = 10000.0):
        return cls(d, heads, 4 * d, FULL, rope_base)


# -- stateless ops --------------------------------------------------------

def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    return x * T.rsqrt_mean_square(x, eps) * gain


def softcap(x: Tensor, cap: float) -> Tensor:
    return T.softcap(x, cap)


def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0):
    if head_dim % 2:
        raise ValueError(f"rope: head dim must be even, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope(x: Tensor, positions: np.ndarray | None = None, base: float = 10000.0) -> Tensor:
    """Rotate channel pairs (c, c + d_h/2) of ``x[..., N, d_h]`` by position angles."""
    x = T.as_tensor(x)
    n, dh = x.shape[-2], x.shape[-1]
    if positions is None:
        positions = np.arange(n)
    cos, sin = rope_tables(positions, dh, base)
    h = dh // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bw(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _make(out, (x,), bw, "rope")


def attention_mask(n: int, window=FULL) -> np.ndarray:
    """Boolean (n, n) matrix, True where query i may attend to key j."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    allowed = j <= i
    if window != FULL:
        window = int(window)
        if window < 1:
            raise ValueError(f"attention window must be >= 1, got {window}")
        allowed &= j > i - window
    return allowed


def dense_attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d_h) masked) v, composed from graph primitives."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ T.swapaxes(k, -1, -2)) * scale
    scores = T.masked_fill(scores, ~allowed, -np.inf)
    return T.softmax(scores, axis=-1) @ v


def _attn_fwd(q, k, v, allowed):
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    s = np.where(allowed, s, -np.inf)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ v, p


def _attn_bwd(g, q, k, v, p):
    scale = 1.0 / np.sqrt(q.shape[-1])
    dp = g @ np.swapaxes(v, -1, -2)
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    return ds @ k, np.swapaxes(ds, -1, -2) @ q, np.swapaxes(p, -1, -2) @ g


def _chunk(x: np.ndarray, c: int, nc: int) -> tuple[np.ndarray, np.ndarray]:
    """(..., N, dh) -> this-chunk view (..., nc, c, dh) and [prev, this] keys (..., nc, 2c, dh)."""
    n = x.shape[-2]
    pad = nc * c - n
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-2] + (pad, x.shape[-1]))], axis=-2)
    cur = x.reshape(x.shape[:-2] + (nc, c, x.shape[-1]))
    prev = np.concatenate([np.zeros_like(cur[..., :1, :, :]), cur[..., :-1, :, :]], axis=-3)
    return cur, np.concatenate([prev, cur], axis=-2)


def _unchunk_keys(d2: np.ndarray, c: int, n: int) -> np.ndarray:
    cur = d2[..., c:, :].copy()
    cur[..., :-1, :, :] += d2[..., 1:, :c, :]
    return cur.reshape(cur.shape[:-3] + (-1, cur.shape[-1]))[..., :n, :]


def attend(q: Tensor, k: Tensor, v: Tensor, window=FULL) -> Tensor:
    """Fused causal (optionally sliding-window) attention over ``(..., N, d_h)``.

    Windows shorter than the sequence are evaluated chunk-wise: queries in
    chunk ``c`` only score keys of chunks ``c-1`` and ``c``, so the cost is
    O(N * window) rather than O(N^2).  Windows >= N use the dense path and are
    identical to full attention.
    """
    n = q.shape[-2]
    if window != FULL and int(window) < 1:
        raise ValueError(f"attention window must be >= 1, got {window}")
    if window == FULL or int(window) >= n:
        allowed = attention_mask(n, FULL)
        out, p = _attn_fwd(q.data, k.data, v.data, allowed)

        def bw(g):
            return _attn_bwd(g, q.data, k.data, v.data, p)

        return _make(out, (q, k, v), bw, "attention")

    w = int(window)
    c = min(max(w, 32), n)
    nc = -(-n // c)
    qc, _ = _chunk(q.data, c, nc)
    _, kc = _chunk(k.data, c, nc)
    _, vc = _chunk(v.data, c, nc)
    qpos = np.arange(nc)[:, None, None] * c + np.arange(c)[None, :, None]
    kpos = np.arange(nc)[:, None, None] * c - c + np.arange(2 * c)[None, None, :]
    allowed = (kpos <= qpos) & (kpos > qpos - w) & (kpos >= 0)
    out, p = _attn_fwd(qc, kc, vc, allowed)
    lead = q.shape[:-2]
    out = out.reshape(lead + (nc * c, q.shape[-1]))[..., :n, :]

    def bw(g):
        gc, _ = _chunk(g, c, nc)
        dq, dk2, dv2 = _attn_bwd(gc, qc, kc, vc, p)
        dq = dq.reshape(lead + (nc * c, q.shape[-1]))[..., :n, :]
        return dq, _unchunk_keys(dk2, c, n), _unchunk_keys(dv2, c, n)

    return _make(out, (q, k, v), bw, "attention")


# -- modules --------------------------------------------------------------

class Attention(Module):
    def __init__(self, d: int, num_heads: int, window=FULL, rope_base: float = 10000.0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if d % num_heads:
            raise ValueError(f"embedding_dim {d} not divisible by num_heads {num_heads}")
        self.d, self.h, self.window, self.rope_base = d, num_heads, window, rope_base
        std = d ** -0.5
        self.wq = init_param(rng, (d, d), std)
        self.wk = init_param(rng, (d, d), std)
        self.wv = init_param(rng, (d, d), std)
        self.wo = init_param(rng, (d, d), std)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.h, self.d // self.h).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        q = rope(self._heads(x @ self.wq), base=self.rope_base)
        k = rope(self._heads(x @ self.wk), base=self.rope_base)
        v = self._heads(x @ self.wv)
        y = attend(q, k, v, self.window)
        return y.transpose(0, 2, 1, 3).reshape(b, n, d) @ self.wo


class GeGLU(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.w_gate = init_param(rng, (d, hidden), d ** -0.5)
        self.w_up = init_param(rng, (d, hidden), d ** -0.5)
        self.w_down = init_param(rng, (hidden, d), hidden ** -0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return (T.gelu(x @ self.w_gate) * (x @ self.w_up)) @ self.w_down


class RMSNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return rmsnorm(x, self.gain, self.eps)


class DecoderLayer(Module):
    """Residual block with norms before and after each sublayer."""

    def __init__(self, cfg: DecoderLayerConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        d = cfg.embedding_dim
        self.cfg = cfg
        self.pre_attn_norm = RMSNorm(d)
        self.attn = Attention(d, cfg.num_heads, cfg.attention_window, cfg.rope_base, rng)
        self.post_attn_norm = RMSNorm(d)
        self.pre_mlp_norm = RMSNorm(d)
        self.mlp = GeGLU(d, cfg.mlp_hidden, rng)
        self.post_mlp_norm = RMSNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.post_attn_norm(self.attn(self.pre_attn_norm(x)))
        return x + self.post_mlp_norm(self.mlp(self.pre_mlp_norm(x)))


class Stack(Module):
    def __init__(self, cfg: DecoderLayerConfig, n_layers: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def causal_attention(x: Tensor, window=FULL, num_heads: int = 1,
                     rng: np.random.Generator | None = None) -> Tensor:
    """One freshly initialised attention sublayer applied to ``x`` of shape (N, d) or (B, N, d)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    y = Attention(x.shape[-1], num_heads, window, rng=rng)(x)
    return y.reshape(y.shape[1:]) if squeeze else y


def geglu_mlp(x: Tensor, hidden: int, rng: np.random.Generator | None = None) -> Tensor:
    return GeGLU(x.shape[-1], hidden, rng)(x)
