"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes   b"SCTKCKPT"
    version   uint32    currently 1
    hlen      uint64    length of the JSON header in bytes
    header    hlen bytes UTF-8 JSON
    payload   concatenated float64 little-endian tensors

The header holds ``model_config``, ``train_config``, ``counters`` (step,
bytes_seen, ...) and ``tensors``: a list of ``{"name", "shape", "offset"}``
records, ``offset`` counted in bytes from the start of the payload.  Model
parameters are stored under their dotted parameter names; optimizer moments
under ``adam.m.<name>`` / ``adam.v.<name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SCTKCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adam.")}


def save_checkpoint(path, ckpt: Checkpoint):
    records, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "counters": ckpt.counters,
        "tensors": records,
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(header)) + header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    payload = memoryview(raw)[start + hlen:]
    tensors = {}
    for rec in header["tensors"]:
        n = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=rec["offset"])
        tensors[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)
    return Checkpoint(tensors=tensors, model_config=header["model_config"],
                      train_config=header["train_config"], counters=header["counters"])
