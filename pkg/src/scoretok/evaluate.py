"""Evaluation, the uniform-stride baseline, FLOPs accounting and boundary rendering."""
from __future__ import annotations

import html
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import make_batch
from .model import ARUNet, ModelConfig
from .objective import LN2, token_logprobs
from .policy import EVAL

BYTE_MATRICES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


@dataclass
class EvalReport:
    bits_per_byte: float
    achieved_rate: float
    flops_per_sequence: int
    n_bytes: int
    mean_p: float
    boundary_precision: float | None = None
    boundary_recall: float | None = None
    boundary_precision_tol1: float | None = None
    boundary_recall_tol1: float | None = None
    mean_p_at_starts: float | None = None
    mean_p_elsewhere: float | None = None

    def as_row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def uniform_baseline_mask(n: int, rate: float) -> np.ndarray:
    """Exactly ``round(n * rate)`` evenly spaced boundaries starting at 0."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    k = max(1, math.floor(n * rate + 0.5))
    mask = np.zeros(n, dtype=np.int8)
    mask[(np.arange(k) * n) // k] = 1
    return mask


# -- FLOPs ----------------------------------------------------------------

def _layer_matrix_params(d: int, mlp_hidden: int) -> int:
    return 4 * d * d + 3 * d * mlp_hidden


def param_census(cfg: ModelConfig) -> dict[str, int]:
    """Matrix parameter counts by level (embedding lookup and norm gains excluded)."""
    d, v = cfg.embedding_dim, cfg.vocab_size
    byte_layers = (cfg.n_down_layers + cfg.n_up_layers) * _layer_matrix_params(d, d)
    policy = d * (cfg.policy_window + 1)
    heads = 2 * d * v
    token_layers = cfg.n_mid_layers * _layer_matrix_params(d, 4 * d)
    return {"byte": byte_layers + policy + heads, "token": token_layers,
            "byte_layers": byte_layers, "policy": policy, "unembed": heads}


def model_param_census(model: ARUNet) -> dict[str, int]:
    """Same census read off an instantiated model's parameter tensors."""
    byte = token = 0
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith(("encoder.", "decoder.")) and leaf in BYTE_MATRICES:
            byte += p.size
        elif name.startswith("backbone.") and leaf in BYTE_MATRICES:
            token += p.size
        elif name in ("policy.w", "head.w", "early_head.w"):
            byte += p.size
    return {"byte": byte, "token": token}


def flops_per_sequence(cfg: ModelConfig, n: int, m: int) -> int:
    """6 FLOPs per matrix parameter per byte (byte level) or token (token level)."""
    if m > n:
        raise ValueError(f"token count {m} exceeds byte count {n}")
    c = param_census(cfg)
    return 6 * (c["byte"] * n + c["token"] * m)


# -- evaluation -----------------------------------------------------------

def _match(pred: np.ndarray, true: np.ndarray, tol: int) -> tuple[int, int]:
    """(#pred matched to some true within tol, #true matched by some pred within tol)."""
    if tol == 0:
        hit = int((pred & true).sum())
        return hit, hit
    def dilate(x):
        out = x.copy()
        for s in range(1, tol + 1):
            out[..., s:] |= x[..., :-s]
            out[..., :-s] |= x[..., s:]
        return out
    return int((pred & dilate(true)).sum()), int((true & dilate(pred)).sum())


def evaluate(model: ARUNet, seqs: np.ndarray, mode: str = EVAL, seed: int = 0,
             batch_size: int = 16, labels: np.ndarray | None = None,
             mask: np.ndarray | None = None) -> EvalReport:
    """Bits-per-byte and boundary statistics over ``seqs`` (n, L) content bytes.

    ``labels`` (n, L) marks true segment starts in content coordinates; the
    model's boundary at input position ``i`` refers to content byte ``i-1``
    (position 0 is BOS), so boundary stats are computed on positions 1..L-1.
    """
    seqs = np.atleast_2d(np.asarray(seqs))
    if len(seqs) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    # a (n, L) mask gives one row per document; a single (L,) row applies to all
    per_doc = mask is not None and np.ndim(mask) == 2
    if per_doc and np.shape(mask)[0] != len(seqs):
        raise ValueError(f"mask has {np.shape(mask)[0]} rows for {len(seqs)} documents")
    nll = 0.0
    n_bytes = tokens = 0
    a_all, p_all = [], []
    for s in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[s:s + batch_size])
        rng = np.random.default_rng([seed, s])
        m = mask[s:s + batch_size] if per_doc else mask
        tr = model(batch.inputs, mode=mode, rng=rng, mask=m)
        nll -= float(token_logprobs(tr.lm_logits, batch.targets).data.sum())
        n_bytes += batch.targets.size
        tokens += int(tr.num_tokens.sum())
        a_all.append(tr.boundary.a)
        p_all.append(tr.boundary.p.data)
    a = np.concatenate(a_all)
    p = np.concatenate(p_all)
    n = seqs.shape[1]
    report = EvalReport(
        bits_per_byte=nll / n_bytes / LN2,
        achieved_rate=tokens / a.size,
        flops_per_sequence=flops_per_sequence(model.cfg, n, int(round(tokens / len(seqs)))),
        n_bytes=n_bytes,
        mean_p=float(p[:, 1:].mean()),
    )
    if labels is not None:
        true = np.asarray(labels, dtype=bool)[:, : n - 1]
        pred = a[:, 1:].astype(bool)
        pp = p[:, 1:]
        hit_p, _ = _match(pred, true, 0)
        report.boundary_precision = hit_p / max(int(pred.sum()), 1)
        report.boundary_recall = hit_p / max(int(true.sum()), 1)
        hp, ht = _match(pred, true, 1)
        report.boundary_precision_tol1 = hp / max(int(pred.sum()), 1)
        report.boundary_recall_tol1 = ht / max(int(true.sum()), 1)
        report.mean_p_at_starts = float(pp[true].mean())
        report.mean_p_elsewhere = float(pp[~true].mean())
    return report


# -- rendering ------------------------------------------------------------

def _rgb(p: float) -> tuple[int, int, int]:
    p = min(max(float(p), 0.0), 1.0)
    return int(round(255 * p)), 0, int(round(255 * (1 - p)))


def _char_spans(data: bytes) -> list[tuple[int, int]] | None:
    """UTF-8 character byte spans, or None when ``data`` is not valid UTF-8."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        return None
    spans, off = [], 0
    for ch in text:
        n = len(ch.encode("utf-8"))
        spans.append((off, off + n))
        off += n
    return spans


def render_boundaries(text_bytes: bytes, probabilities, fmt: str = "ansi") -> str:
    """Colour each character from blue (p=0) to red (p=1).

    Multi-byte characters take the probability of their last byte.  Invalid
    UTF-8 falls back to one escaped glyph per byte.
    """
    data = bytes(text_bytes)
    probs = np.asarray(probabilities, dtype=np.float64)
    if len(probs) != len(data):
        raise ValueError(f"{len(data)} bytes but {len(probs)} probabilities")
    spans = _char_spans(data)
    if spans is None:
        pieces = [(data[i:i + 1].decode("latin-1") if 32 <= data[i] < 127 else f"\\x{data[i]:02x}",
                   probs[i]) for i in range(len(data))]
    else:
        pieces = [(data[s:e].decode("utf-8"), probs[e - 1]) for s, e in spans]
    if fmt == "ansi":
        out = []
        for ch, p in pieces:
            r, g, b = _rgb(p)
            out.append(f"\x1b[38;2;{r};{g};{b}m{ch}")
        return "".join(out) + "\x1b[0m"
    if fmt == "html":
        body = "".join(
            '<span style="color:rgb({},{},{})">{}</span>'.format(*_rgb(p), html.escape(ch))
            for ch, p in pieces)
        return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"></head>"
                f"<body><pre style=\"font-family:monospace\">{body}</pre></body></html>\n")
    raise ValueError(f"unknown render format {fmt!r}")
