"""
Learning word boundaries on a synthetic language
================================================

Words are drawn from a Zipf-distributed lexicon and separated by spaces.
Half the time a word repeats the one two words earlier, which only a model
with word-aligned tokens can exploit.  Pass a step count on the command line.
The default 300 steps takes about four minutes on one core and only shows the
start of the effect; 1600 steps (the acceptance run) puts almost all the
boundary probability on the spaces.
"""

import sys

import numpy as np

from scoretok.data import Batcher, SyntheticSpec, gen_synthetic, make_batch, make_lexicon
from scoretok.evaluate import evaluate, render_boundaries
from scoretok.model import ARUNet, ModelConfig
from scoretok.policy import EVAL
from scoretok.train import TrainConfig, Trainer

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

lex = make_lexicon(100, seed=1, min_len=3)
train = gen_synthetic(SyntheticSpec(lex, "space", seed=2, repeat_prob=0.5), 2000, 256)
held = gen_synthetic(SyntheticSpec(lex, "space", seed=3, repeat_prob=0.5), 32, 256)
print(bytes(held.docs[0][:80]).decode())

cfg = ModelConfig(byte_window=3, gamma=0.9, lambda_target=10.0)
trainer = Trainer(ARUNet(cfg), TrainConfig(learning_rate=6e-3, warmup_bytes=min(100, steps // 4) * 4096,
                                          training_bytes=steps * 4096))


def progress(res):
    if res.step % 50 == 0:
        print(f"step {res.step:4d}  bpb {res.report.bits_per_byte:.3f}  rate {res.report.rate:.3f}")


trainer.run(Batcher(train.docs, 16, seed=0), callback=progress)

# %%
# Held-out statistics, then the first document coloured by boundary probability
rep = evaluate(trainer.model, held.docs, labels=held.labels())
print(f"bits/byte {rep.bits_per_byte:.3f}, p at word starts {rep.mean_p_at_starts:.3f}, "
      f"elsewhere {rep.mean_p_elsewhere:.3f}")
tr = trainer.model(make_batch(held.docs[:1]).inputs, mode=EVAL, rng=np.random.default_rng(0))
print(render_boundaries(bytes(held.docs[0, :-1]), tr.boundary.p.data[0, 1:]))
