"""Byte corpora: ingestion, a synthetic segmented language, and batching.

Token ids are raw byte values 0..255 plus two specials: ``BOS = 256`` starts
every row and ``PAD = 257`` is reserved (rows are fixed length, so it is never
emitted).

Corpus file formats
-------------------
``lines``   newline-delimited UTF-8/bytes documents (the newline is a delimiter,
            not part of the document).
``binary``  length-prefixed records: ``uint32`` little-endian byte count followed
            by that many raw bytes, repeated.  Use it for documents that may
            contain newlines.
Boundary files hold one line per document with comma-separated byte offsets.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model import BOS, PAD, VOCAB_SIZE

__all__ = [
    "BOS", "PAD", "VOCAB_SIZE", "ByteBatch", "SyntheticSpec", "SyntheticCorpus",
    "make_lexicon", "zipf_probs", "gen_synthetic", "ingest_corpus", "read_documents",
    "write_documents", "write_boundaries", "read_boundaries", "Batcher", "batcher",
]


@dataclass
class ByteBatch:
    ids: np.ndarray      # (B, L+1) BOS + L content bytes
    targets: np.ndarray  # (B, L) next-byte ids

    @property
    def inputs(self) -> np.ndarray:
        return self.ids[:, :-1]


def make_batch(seqs: np.ndarray) -> ByteBatch:
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    if seqs.size and (seqs.min() < 0 or seqs.max() > 255):
        raise ValueError("content bytes must lie in [0, 255]")
    ids = np.concatenate([np.full((seqs.shape[0], 1), BOS, dtype=np.int64), seqs], axis=1)
    return ByteBatch(ids=ids, targets=ids[:, 1:].copy())


# -- synthetic segmented language ----------------------------------------

@dataclass
class SyntheticSpec:
    lexicon: list[bytes] = field(default_factory=list)
    separator: str = "space"     # "none" | "space"
    zipf_s: float = 1.2
    seed: int = 0
    repeat_prob: float = 0.0     # chance a word copies the one ``repeat_lag`` words back
    repeat_lag: int = 2

    def __post_init__(self):
        if self.separator not in ("none", "space"):
            raise ValueError(f"separator must be 'none' or 'space', got {self.separator!r}")
        if not 0.0 <= self.repeat_prob < 1.0:
            raise ValueError(f"repeat_prob must lie in [0, 1), got {self.repeat_prob}")
        if self.repeat_lag < 1:
            raise ValueError("repeat_lag must be positive")


@dataclass
class SyntheticCorpus:
    docs: np.ndarray            # (n_docs, doc_len) uint8
    starts: list[np.ndarray]    # per-doc offsets where a segment begins
    word_ids: list[np.ndarray]  # per-doc lexicon index of each segment

    def labels(self) -> np.ndarray:
        lab = np.zeros(self.docs.shape, dtype=bool)
        for i, s in enumerate(self.starts):
            lab[i, s] = True
        return lab


def make_lexicon(n_words: int, seed: int = 0, min_len: int = 2, max_len: int = 12,
                 alphabet: bytes = b"abcdefghijklmnopqrstuvwxyz") -> list[bytes]:
    """Distinct random lowercase words, shortest first so Zipf favours short ones."""
    rng = np.random.default_rng(seed)
    letters = np.frombuffer(alphabet, dtype=np.uint8)
    words: dict[bytes, None] = {}
    while len(words) < n_words:
        n = int(rng.integers(min_len, max_len + 1))
        words.setdefault(bytes(rng.choice(letters, size=n)), None)
    return sorted(words, key=len)


def zipf_probs(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def gen_synthetic(spec: SyntheticSpec, n_docs: int, doc_len: int) -> SyntheticCorpus:
    """Documents of exactly ``doc_len`` bytes made of Zipf-sampled lexicon words.

    With ``separator="space"`` each word is preceded by a single space, so a
    segment is ``b" " + word`` and its recorded start offset is the space.
    Without separators the segment is the bare word.

    With ``repeat_prob = q > 0`` each word (from the ``repeat_lag``-th on)
    copies the word ``repeat_lag`` positions back with probability ``q`` and is
    a fresh Zipf draw otherwise.  Zipf is the stationary law of that chain, so
    word frequencies stay Zipfian while predicting a word now depends on
    context a few words back.
    """
    if not spec.lexicon:
        raise ValueError("lexicon must be non-empty")
    rng = np.random.default_rng(spec.seed)
    probs = zipf_probs(len(spec.lexicon), spec.zipf_s)
    sep = b" " if spec.separator == "space" else b""
    docs = np.zeros((n_docs, doc_len), dtype=np.uint8)
    starts, word_ids = [], []
    for d in range(n_docs):
        buf = bytearray()
        st, wi = [], []
        while len(buf) < doc_len:
            k = int(rng.choice(len(probs), p=probs))
            if spec.repeat_prob and len(wi) >= spec.repeat_lag and rng.random() < spec.repeat_prob:
                k = wi[-spec.repeat_lag]
            st.append(len(buf))
            wi.append(k)
            buf += sep + spec.lexicon[k]
        docs[d] = np.frombuffer(bytes(buf[:doc_len]), dtype=np.uint8)
        starts.append(np.asarray(st, dtype=np.int64))
        word_ids.append(np.asarray(wi, dtype=np.int64))
    return SyntheticCorpus(docs=docs, starts=starts, word_ids=word_ids)


# -- corpus files ---------------------------------------------------------

def write_documents(path, docs: Iterable[bytes], fmt: str = "lines"):
    path = Path(path)
    with path.open("wb") as f:
        for doc in docs:
            doc = bytes(doc)
            if fmt == "lines":
                if b"\n" in doc:
                    raise ValueError("document contains a newline; use the binary format")
                f.write(doc + b"\n")
            elif fmt == "binary":
                f.write(struct.pack("<I", len(doc)) + doc)
            else:
                raise ValueError(f"unknown corpus format {fmt!r}")


def read_documents(path, fmt: str = "lines") -> list[bytes]:
    raw = Path(path).read_bytes()
    if fmt == "lines":
        docs = raw.split(b"\n")
        if docs and docs[-1] == b"":
            docs.pop()
        return docs
    if fmt == "binary":
        docs, off = [], 0
        while off < len(raw):
            if off + 4 > len(raw):
                raise ValueError(f"{path}: truncated length prefix at offset {off}")
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            if off + n > len(raw):
                raise ValueError(f"{path}: truncated record at offset {off}")
            docs.append(raw[off:off + n])
            off += n
        return docs
    raise ValueError(f"unknown corpus format {fmt!r}")


def ingest_corpus(path, min_len: int, target_len: int, seed: int = 0,
                  fmt: str = "lines") -> np.ndarray:
    """Drop documents shorter than ``min_len``, truncate the rest to ``target_len``.

    Returns a (n_kept, target_len) uint8 array in a seed-determined order.
    Documents shorter than ``target_len`` cannot fill a row, so ``min_len``
    below ``target_len`` is rejected.
    """
    if min_len < target_len:
        raise ValueError(f"min_len ({min_len}) must be >= target_len ({target_len})")
    try:
        docs = read_documents(path, fmt)
    except OSError as e:
        raise OSError(f"cannot read corpus {path}: {e}") from e
    kept = [d[:target_len] for d in docs if len(d) >= min_len]
    if not kept:
        raise ValueError(f"{path}: no documents of at least {min_len} bytes")
    out = np.frombuffer(b"".join(kept), dtype=np.uint8).reshape(len(kept), target_len)
    order = np.random.default_rng(seed).permutation(len(kept))
    return out[order]


def write_boundaries(path, starts: Sequence[np.ndarray]):
    with Path(path).open("w") as f:
        for s in starts:
            f.write(",".join(str(int(x)) for x in s) + "\n")


def read_boundaries(path) -> list[np.ndarray]:
    lines = Path(path).read_text().splitlines()
    return [np.array([int(x) for x in ln.split(",") if x], dtype=np.int64) for ln in lines]


# -- batching -------------------------------------------------------------

class Batcher:
    """Deterministic fixed-size batches over a (n, L) byte array.

    Batch ``k`` is a pure function of ``(seed, k)``: epoch ``e = k // per_epoch``
    uses permutation ``default_rng([seed, e])``; the last partial batch of
    every epoch is dropped.  ``epochs=None`` cycles forever.
    """

    def __init__(self, seqs: np.ndarray, batch_size: int, seed: int = 0, epochs: int | None = None):
        self.seqs = np.asarray(seqs)
        self.batch_size = batch_size
        self.seed = seed
        self.epochs = epochs
        self.per_epoch = len(self.seqs) // batch_size
        if self.per_epoch == 0:
            raise ValueError(f"{len(self.seqs)} sequences cannot fill a batch of {batch_size}")

    def __len__(self):
        if self.epochs is None:
            raise TypeError("infinite batcher has no length")
        return self.per_epoch * self.epochs

    def batch(self, k: int) -> ByteBatch:
        epoch, j = divmod(k, self.per_epoch)
        if self.epochs is not None and epoch >= self.epochs:
            raise IndexError(f"batch {k} past the end of {self.epochs} epochs")
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.seqs))
        rows = perm[j * self.batch_size:(j + 1) * self.batch_size]
        return make_batch(self.seqs[rows])

    def __iter__(self) -> Iterator[ByteBatch]:
        return self.iter_from(0)

    def iter_from(self, start: int) -> Iterator[ByteBatch]:
        k = start
        while self.epochs is None or k < len(self):
            yield self.batch(k)
            k += 1


def batcher(stream: np.ndarray, batch_size: int, seed: int = 0, epochs: int | None = 1) -> Batcher:
    return Batcher(stream, batch_size, seed, epochs)
