"""What gets sent, and how often.

Synchronous training all-reduces a full gradient every step; DiLoCo
all-reduces a parameter delta once every H steps. Under the simulator's
cost model each event costs k * P * bytes_per_element * 2 bytes, so the
byte ratio between the two is exactly H.
"""

from diloco_desk.data import CorpusSpec
from diloco_desk.engine import StageConfig, communication_ratio, run_diloco_stage, run_sync_stage
from diloco_desk.models import ModelSpec, init_params

spec = ModelSpec(kind="softmax-regression", vocab_size=8, context_length=1, hidden_dims=(),
                 init_seed=2)
corpus = CorpusSpec(vocab_size=8, length=20000)
theta0 = init_params(spec)
steps, k = 600, 4

_, sync = run_sync_stage(theta0, StageConfig(method="sync", k=k, steps=steps, corpus=corpus), spec)
print(f"P = {sync.param_count} parameters, k = {k} workers, {steps} steps")
print(f"sync:   {sync.ledger.count():4d} events, {sync.ledger.total_bytes:>10,d} bytes")
for H in (1, 10, 30, 100, 200):
    cfg = StageConfig(method="diloco", k=k, steps=steps, H=H, corpus=corpus)
    _, dil = run_diloco_stage(theta0, cfg, spec)
    print(f"H={H:<4d} {dil.ledger.count():4d} events, {dil.ledger.total_bytes:>10,d} bytes, "
          f"ratio {communication_ratio(sync.ledger, dil.ledger):g}, "
          f"final probe loss {dil.final_probe_loss():.4f} (sync {sync.final_probe_loss():.4f})")
