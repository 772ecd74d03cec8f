"""Command line entry point: ``scoretok {train,data,eval,baseline,flops}``.

Config files are flat ``key = value`` text.  Blank lines and ``#`` comments
are ignored.  Keys are the fields of :class:`ModelConfig` and
:class:`TrainConfig` plus a few run-level keys (see ``RUN_KEYS``).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import (Batcher, SyntheticSpec, gen_synthetic, ingest_corpus, make_batch, make_lexicon,
                   read_boundaries, read_documents, write_boundaries, write_documents)
from .evaluate import evaluate, flops_per_sequence, param_census, render_boundaries, uniform_baseline_mask
from .model import ARUNet, ModelConfig
from .policy import EVAL, TRAIN
from .train import TrainConfig, Trainer, model_from_checkpoint

log = logging.getLogger("scoretok")

RUN_KEYS = {
    "data": "",             # training corpus (lines or binary format)
    "data_format": "lines",
    "out_dir": "run",       # metrics.csv and checkpoints go here
    "max_steps": 0,         # 0: run until training_bytes
    "data_seed": 0,
}

SYNTH_KEYS = {
    "n_words": 100, "min_len": 3, "max_len": 12, "lexicon_seed": 1,
    "separator": "space", "zipf_s": 1.2, "seed": 2, "n_docs": 2000, "doc_len": 256,
    "repeat_prob": 0.0, "repeat_lag": 2,
}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _fill(defaults: dict, raw: dict[str, str]) -> dict:
    return {k: _coerce(raw[k], v) if k in raw else v for k, v in defaults.items()}


def load_config(path) -> tuple[ModelConfig, TrainConfig, dict]:
    """Split a flat config file into model, training and run settings."""
    raw = parse_kv(path)
    groups = []
    known = set(RUN_KEYS)
    for cls in (ModelConfig, TrainConfig):
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        known |= set(defaults)
        groups.append(cls(**_fill(defaults, raw)))
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    return groups[0], groups[1], _fill(RUN_KEYS, raw)


def _print_row(row: dict, out=None):
    w = csv.DictWriter(out or sys.stdout, fieldnames=list(row))
    w.writeheader()
    w.writerow(row)


# -- subcommands ------------------------------------------------------------

def cmd_train(args) -> int:
    mcfg, tcfg, run = load_config(args.config)
    if not run["data"]:
        raise SystemExit("config must set 'data' to a corpus file")
    data_path = Path(run["data"])
    if not data_path.is_absolute():
        data_path = Path(args.config).parent / data_path
    seqs = ingest_corpus(data_path, mcfg.seq_len, mcfg.seq_len, seed=run["data_seed"],
                         fmt=run["data_format"])
    out = Path(run["out_dir"])
    if not out.is_absolute():
        out = Path(args.config).parent / out
    out.mkdir(parents=True, exist_ok=True)
    kw = dict(metrics_path=out / "metrics.csv", checkpoint_dir=out / "checkpoints")
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, tcfg, **kw)
    else:
        trainer = Trainer(ARUNet(mcfg), tcfg, **kw)
    data = Batcher(seqs, tcfg.effective_batch_size, seed=tcfg.seed)

    def report(res):
        if res.step % 10 == 0:
            r = res.report
            log.info("step %d  bpb %.4f  rate %.3f  p %.3f  lr %.2e", res.step, r.bits_per_byte,
                     r.rate, r.mean_p, res.lr)

    result = trainer.run(data, max_steps=run["max_steps"] or None, callback=report)
    trainer.save(out / "final.ckpt")
    print(f"{result['stop_reason']}: step {result['step']}, {result['bytes_seen']} bytes, "
          f"checkpoint {out / 'final.ckpt'}")
    return 0


def cmd_data_synth(args) -> int:
    raw = parse_kv(args.spec)
    unknown = sorted(set(raw) - set(SYNTH_KEYS))
    if unknown:
        raise SystemExit(f"{args.spec}: unknown keys {unknown}")
    s = _fill(SYNTH_KEYS, raw)
    lex = make_lexicon(s["n_words"], seed=s["lexicon_seed"], min_len=s["min_len"], max_len=s["max_len"])
    spec = SyntheticSpec(lex, s["separator"], s["zipf_s"], s["seed"],
                         repeat_prob=s["repeat_prob"], repeat_lag=s["repeat_lag"])
    corpus = gen_synthetic(spec, s["n_docs"], s["doc_len"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_documents(out / "corpus.txt", (bytes(d) for d in corpus.docs))
    write_boundaries(out / "boundaries.txt", corpus.starts)
    (out / "lexicon.txt").write_bytes(b"\n".join(lex) + b"\n")
    print(f"wrote {len(corpus.docs)} documents of {s['doc_len']} bytes to {out}")
    return 0


def cmd_data_ingest(args) -> int:
    seqs = ingest_corpus(args.inp, args.min_len, args.target_len, seed=args.seed, fmt=args.format)
    out = Path(args.out) if args.out else Path(args.inp).with_suffix(".ingested")
    fmt = "binary" if args.format == "binary" or np.isin(seqs, 10).any() else "lines"
    write_documents(out, (bytes(r) for r in seqs), fmt=fmt)
    print(f"kept {len(seqs)} sequences of {args.target_len} bytes -> {out} ({fmt})")
    return 0


def _labels(path, shape) -> np.ndarray:
    starts = read_boundaries(path)
    if len(starts) < shape[0]:
        raise SystemExit(f"{path}: {len(starts)} boundary lines for {shape[0]} documents")
    lab = np.zeros(shape, dtype=bool)
    for i in range(shape[0]):
        s = starts[i]
        lab[i, s[s < shape[1]]] = True
    return lab


def cmd_eval(args) -> int:
    model = model_from_checkpoint(args.ckpt)
    # a model trained on evenly spaced boundaries is evaluated on the same ones
    uniform = load_checkpoint(args.ckpt).train_config.get("boundary_mode") == "uniform"
    n = model.cfg.seq_len
    docs = read_documents(args.data, args.format)
    docs = [d[:n] for d in docs if len(d) >= n]
    if not docs:
        raise SystemExit(f"{args.data}: no documents of at least {n} bytes")
    seqs = np.frombuffer(b"".join(docs), dtype=np.uint8).reshape(len(docs), n)
    labels = _labels(args.labels, seqs.shape) if args.labels else None
    mask = uniform_baseline_mask(n, model.cfg.target_rate) if uniform else None
    rep = evaluate(model, seqs, mode=args.mode, seed=args.seed, labels=labels, mask=mask)
    _print_row(rep.as_row())
    if args.render:
        tr = model(make_batch(seqs[:1]).inputs, mode=args.mode, rng=np.random.default_rng(args.seed),
                   mask=mask)
        # input position i + 1 holds content byte i; the final content byte is
        # only ever a target, so it has no boundary decision and is not drawn
        p = tr.boundary.p.data[0, 1:]
        Path(args.render).write_text(render_boundaries(bytes(seqs[0, :-1]), p, fmt="html"))
    return 0


def cmd_baseline(args) -> int:
    mask = uniform_baseline_mask(args.n, args.rate)
    print(f"boundaries: {int(mask.sum())}")
    print(",".join(str(i) for i in np.flatnonzero(mask)))
    return 0


def cmd_flops(args) -> int:
    mcfg, _, _ = load_config(args.config)
    c = param_census(mcfg)
    _print_row({"n": args.n, "m": args.m, "p_byte": c["byte"], "p_token": c["token"],
                "flops_per_sequence": flops_per_sequence(mcfg, args.n, args.m)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoretok", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a flat config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    d = sub.add_parser("data", help="corpus generation and ingestion")
    dsub = d.add_subparsers(dest="data_command", required=True)
    s = dsub.add_parser("synth", help="write a synthetic Zipf-lexicon corpus with true boundaries")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_data_synth)
    i = dsub.add_parser("ingest", help="filter by length and truncate a corpus")
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--min-len", type=int, required=True)
    i.add_argument("--target-len", type=int, required=True)
    i.add_argument("--out")
    i.add_argument("--format", choices=("lines", "binary"), default="lines")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(fn=cmd_data_ingest)

    e = sub.add_parser("eval", help="bits-per-byte and boundary statistics of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=(TRAIN, EVAL), default=EVAL)
    e.add_argument("--render", help="write an HTML boundary rendering of the first document")
    e.add_argument("--labels", help="boundary file with true segment starts")
    e.add_argument("--format", choices=("lines", "binary"), default="lines")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("baseline", help="evenly spaced boundary mask")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--rate", type=float, required=True)
    b.set_defaults(fn=cmd_baseline)

    f = sub.add_parser("flops", help="FLOPs per sequence for a config")
    f.add_argument("--config", required=True)
    f.add_argument("--n", type=int, required=True)
    f.add_argument("--m", type=int, required=True)
    f.set_defaults(fn=cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
