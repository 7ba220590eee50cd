"""Desk-scale DiLoCo: low-communication data-parallel training in numpy.

Modules:

- ``numkit``: parameter vectors, matrix helpers, Newton-Schulz, RNG
- ``models``: softmax regression and an MLP character LM with backprop
- ``optim``: SGD, AdamW, Muon inner optimizers; outer momentum step
- ``data``: synthetic corpora, shards, batches
- ``engine``: sync / DiLoCo / hybrid loops, ledgers, drift diagnostics
- ``config``, ``experiment``, ``reports``, ``cli``: the experiment runner
"""

from .engine import (
    CommLedger,
    ConfigError,
    RunReport,
    StageConfig,
    communication_ratio,
    drift_snapshot,
    run_diloco_stage,
    run_hybrid_schedule,
    run_sync_stage,
)
from .models import Batch, ModelSpec, init_params
from .numkit import ParamVector, Rng, TensorLayout
from .optim import AdamWConfig, MuonConfig, OuterConfig, SGDConfig

__version__ = "0.1.0"
