"""Newton-Schulz orthogonalization and the Muon inner optimizer.

Muon replaces a 2-D gradient's singular values with ~1 before stepping.
This script shows the quintic iteration flattening a spectrum, compares the
two built-in coefficient sets, and trains a small MLP with Muon vs AdamW.
"""

import numpy as np

from diloco_desk.models import Batch, ModelSpec, init_params, loss_and_grad
from diloco_desk.numkit import NS_COEFFS_FAST, NS_COEFFS_FIXED_POINT, Rng, newton_schulz_orthogonalize
from diloco_desk.optim import AdamWConfig, MuonConfig, init_inner_state, inner_step

rng = Rng(0)
q1, _ = np.linalg.qr(rng.normal(64).reshape(8, 8))
q2, _ = np.linalg.qr(rng.normal(64).reshape(8, 8))
m = q1 @ np.diag(np.linspace(0.5, 2.0, 8)) @ q2

print("singular values in :", np.round(np.linalg.svd(m, compute_uv=False), 3))
for name, coeffs in (("fixed-point", NS_COEFFS_FIXED_POINT), ("fast", NS_COEFFS_FAST)):
    x = newton_schulz_orthogonalize(m, 5, coeffs)
    err = np.linalg.norm(x.T @ x - np.eye(8)) / 8
    print(f"{name:12s} out:", np.round(np.linalg.svd(x, compute_uv=False), 3),
          f" ||X^T X - I||_F/8 = {err:.4f}")

# A tiny training comparison on random next-token data.
spec = ModelSpec(kind="mlp-char-lm", vocab_size=16, context_length=4, hidden_dims=(32,),
                 embed_dim=8, init_scale=0.2, init_seed=1)
data = Rng(5)
ctx = data.integers(512 * 4, 16).reshape(512, 4)
batch = Batch(ctx, (ctx.sum(axis=1) % 16), 16)  # a learnable deterministic target

for cfg in (AdamWConfig(lr=0.01), MuonConfig(lr=0.02)):
    params, state = init_params(spec), init_inner_state(cfg, init_params(spec).layout)
    for step in range(1, 301):
        value, g = loss_and_grad(params, batch, spec)
        params, state = inner_step(params, g, state, cfg)
        if step in (1, 100, 300):
            print(f"{cfg.kind:6s} step {step:3d} loss {value:.4f}")
