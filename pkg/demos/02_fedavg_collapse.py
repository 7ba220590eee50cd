"""Two sanity reductions of the DiLoCo loop.

1. With H=1, mu=0, eta=1 (heavy-ball) DiLoCo is plain parameter averaging
   after every inner step.
2. With k=1 and the same outer settings, DiLoCo is bit-for-bit the same as
   ordinary single-worker training, whatever H is.
"""

import numpy as np

from diloco_desk import models
from diloco_desk.data import CorpusSpec, next_batch
from diloco_desk.engine import StageConfig, prepare_stage_data, run_diloco_stage
from diloco_desk.models import ModelSpec, init_params
from diloco_desk.numkit import ParamVector
from diloco_desk.optim import AdamWState, OuterConfig, adamw_step

spec = ModelSpec(kind="mlp-char-lm", vocab_size=16, context_length=4, hidden_dims=(16,),
                 embed_dim=8, init_scale=0.2, init_seed=1)
corpus = CorpusSpec(vocab_size=16, length=20000, transition_seed=5)
fedavg = OuterConfig(mu=0.0, eta=1.0, nesterov=False)
theta0 = init_params(spec)

# --- 1. per-step averaging -------------------------------------------------------
k = 4
cfg = StageConfig(method="diloco", k=k, steps=100, H=1, outer=fedavg, corpus=corpus, batch_size=16)
trace = {}
run_diloco_stage(theta0, cfg, spec, observer=lambda step, th: trace.__setitem__(step, th))

data = prepare_stage_data(cfg, spec)
theta, cursors = theta0, [0] * k
states = [AdamWState.zeros(theta0.layout) for _ in range(k)]
worst = 0.0
for step in range(1, cfg.steps + 1):
    replicas = []
    for w in range(k):
        b, cursors[w] = next_batch(data.shards[w], cursors[w], 16, 4, 16)
        p, states[w] = adamw_step(theta, models.grad(theta, b, spec), states[w], cfg.inner)
        replicas.append(p.values)
    theta = ParamVector(theta.layout, np.mean(replicas, axis=0))
    worst = max(worst, np.abs(trace[step].values - theta.values).max())
print(f"H=1 DiLoCo vs hand-written averaging, k={k}: max |diff| = {worst:.3g}")

# --- 2. single worker -------------------------------------------------------------
for H in (1, 10, 50):
    cfg1 = StageConfig(method="diloco", k=1, steps=100, H=H, outer=fedavg, corpus=corpus,
                       batch_size=16)
    final, _ = run_diloco_stage(theta0, cfg1, spec)
    shard = prepare_stage_data(cfg1, spec).shards[0]
    p, s, cur = theta0, AdamWState.zeros(theta0.layout), 0
    for _ in range(100):
        b, cur = next_batch(shard, cur, 16, 4, 16)
        p, s = adamw_step(p, models.grad(p, b, spec), s, cfg1.inner)
    print(f"k=1, H={H:3d}: bitwise identical to plain training -> {final.bitwise_equal(p)}")
