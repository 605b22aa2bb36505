"""
A short training run
====================

Synthesize a handful of scenes, train a few epochs, and score the
held-out split. The full 200-epoch run is ``reo train`` with the
default config.
"""

import tempfile

from reo.config import TrainConfig
from reo.scene import synth_corpus
from reo.train import evaluate, train

root = tempfile.mkdtemp()
synth_corpus(f"{root}/corpus", seed=0, n_train=8, n_val=2)

cfg = TrainConfig(corpus=f"{root}/corpus", epochs=40, batch_size=4)


def show(r):
    if r["step"] % 10 == 0:
        print(f"step {r['step']:3d}  lr {r['lr']:.2e}  loss {r['total']:.3f}")


res = train(cfg, out=f"{root}/run", progress=show)

# Every term of the loss is logged separately.
last = res.log[-1]
print({k: round(v, 3) for k, v in last.items() if k not in ("step", "epoch", "lr")})

# The CSV has one row per scene and class; "all" pools the split.
summ, csv_text = evaluate(res.checkpoint, f"{root}/corpus", "val")
print("\n".join(line for line in csv_text.splitlines() if line.startswith("all,")))
print(summ)
