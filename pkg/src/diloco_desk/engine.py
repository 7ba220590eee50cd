"""Synchronous and DiLoCo training loops, hybrid scheduling, accounting.

Workers are simulated in-process and run one after another in ascending
``worker_id`` order; every cross-worker reduction sums in that same order,
so runs are reproducible bit for bit.

Communication cost model: every synchronization event (a gradient
all-reduce in the synchronous loop, a delta all-reduce in DiLoCo) is
charged ``k * P * bytes_per_element * 2`` bytes, i.e. each worker sends and
receives one parameter-sized payload.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import models
from .data import (
    CorpusSpec,
    Shard,
    generate_corpus,
    materialize_corpus,
    next_batch,
    shard_corpus,
)
from .models import Batch, ModelSpec
from .numkit import ParamVector, Rng, derive_seed
from .optim import (
    AdamWConfig,
    InnerConfig,
    OuterConfig,
    OuterState,
    init_inner_state,
    inner_step,
    outer_step_from_replicas,
    with_lr,
)

__all__ = [
    "ConfigError",
    "StageConfig",
    "WorkerState",
    "SyncRound",
    "CommEvent",
    "CommLedger",
    "DriftRow",
    "DriftReport",
    "LossRow",
    "RunReport",
    "StageData",
    "prepare_stage_data",
    "run_stage",
    "run_sync_stage",
    "run_diloco_stage",
    "run_hybrid_schedule",
    "communication_ratio",
    "drift_snapshot",
]

METHODS = ("sync", "diloco")
LR_SCHEDULES = ("constant", "linear")


class ConfigError(ValueError):
    """Invalid experiment configuration. ``field`` names the offending key."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
        self.message = message


@dataclass(frozen=True)
class StageConfig:
    name: str = "base"
    method: str = "diloco"
    k: int = 8
    steps: int = 100
    H: Optional[int] = None
    outer: Optional[OuterConfig] = None
    inner: InnerConfig = field(default_factory=AdamWConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    batch_size: int = 64
    probe_size: int = 256
    lr_schedule: str = "constant"
    seed: int = 0
    comm_bytes_per_element: int = 8
    replicate_data: bool = False
    reset_inner_state_on_sync: bool = False
    carry_state_across_stages: bool = False
    allow_partial_round: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"must be one of {METHODS}, got {self.method!r}", "method")
        if self.k < 1:
            raise ConfigError("must be >= 1", "k")
        if self.steps < 1:
            raise ConfigError("must be >= 1", "steps")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.probe_size < 1:
            raise ConfigError("must be >= 1", "probe_size")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"must be one of {LR_SCHEDULES}", "lr_schedule")
        if self.comm_bytes_per_element not in (2, 4, 8):
            raise ConfigError("must be 2, 4 or 8", "comm_bytes_per_element")
        if self.method == "diloco":
            if self.H is None:
                raise ConfigError("required for method 'diloco'", "H")
            if self.H < 1:
                raise ConfigError("must be >= 1", "H")
            if self.outer is None:
                object.__setattr__(self, "outer", OuterConfig())
            if self.steps % self.H and not self.allow_partial_round:
                raise ConfigError(
                    f"steps={self.steps} is not divisible by H={self.H}; "
                    "set allow_partial_round to permit a short final round",
                    "steps",
                )
        else:
            if self.H is not None:
                raise ConfigError("only valid for method 'diloco'", "H")
            if self.outer is not None:
                raise ConfigError("only valid for method 'diloco'", "outer")
            if self.reset_inner_state_on_sync or self.allow_partial_round:
                raise ConfigError(
                    "reset_inner_state_on_sync/allow_partial_round only apply to diloco",
                    "flags",
                )

    def lr_factor(self, step: int) -> float:
        """LR multiplier for 1-based ``step`` within the stage."""
        if self.lr_schedule == "linear":
            return 1.0 - (step - 1) / self.steps
        return 1.0


# ---------------------------------------------------------------------------
# reports


@dataclass
class WorkerState:
    worker_id: int
    params: ParamVector
    inner_state: object
    shard: Shard
    cursor: int = 0
    rng: Optional[Rng] = None


@dataclass
class SyncRound:
    round_index: int
    h: int
    per_worker_deltas: list
    averaged_delta: ParamVector
    comm_payload_bytes: int


@dataclass(frozen=True)
class CommEvent:
    step: int
    payload_bytes: int
    kind: str  # "grad-allreduce" | "delta-allreduce"


@dataclass
class CommLedger:
    events: list = field(default_factory=list)

    def record(self, step: int, payload_bytes: int, kind: str) -> None:
        self.events.append(CommEvent(step, payload_bytes, kind))

    def totals(self) -> dict:
        out: dict = {}
        for e in self.events:
            out[e.kind] = out.get(e.kind, 0) + e.payload_bytes
        return out

    @property
    def total_bytes(self) -> int:
        return sum(e.payload_bytes for e in self.events)

    def count(self, kind: Optional[str] = None) -> int:
        return sum(1 for e in self.events if kind is None or e.kind == kind)

    def merged(self, other: "CommLedger") -> "CommLedger":
        return CommLedger(self.events + other.events)


@dataclass
class DriftRow:
    round_index: int
    step: int
    max_pairwise_distance: float
    mean_delta_norm: float
    delta_cosine: np.ndarray
    post_sync_max_distance: float = float("nan")


@dataclass
class DriftReport:
    rows: list = field(default_factory=list)


@dataclass(frozen=True)
class LossRow:
    step: int
    worker: Optional[int]  # None marks the global row
    loss_train: Optional[float]
    loss_probe: Optional[float]


@dataclass
class StageCarry:
    """Optimizer and data state handed to the next stage when it opts in."""

    method: str
    k: int
    inner_states: list
    cursors: list
    outer_v: Optional[ParamVector] = None


@dataclass
class RunReport:
    stage: str
    method: str
    k: int
    steps: int
    H: Optional[int]
    param_count: int
    initial_digest: str
    final_digest: str
    losses: list
    ledger: CommLedger
    drift: DriftReport
    rounds: list
    wall_time: float
    carry: Optional[StageCarry] = field(default=None, repr=False)

    def global_losses(self) -> list:
        return [r for r in self.losses if r.worker is None]

    def final_probe_loss(self) -> float:
        return [r.loss_probe for r in self.losses if r.loss_probe is not None][-1]


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class StageData:
    shards: list
    probe: Batch


@functools.lru_cache(maxsize=16)
def _corpus(spec: CorpusSpec, stream: int) -> np.ndarray:
    tokens = materialize_corpus(spec) if stream == 0 else generate_corpus(spec, stream)
    tokens.setflags(write=False)
    return tokens


def prepare_stage_data(cfg: StageConfig, model: ModelSpec) -> StageData:
    """Worker shards (stream 0) and the held-out probe batch (stream 1)."""
    C = model.context_length
    corpus = _corpus(cfg.corpus, 0)
    if cfg.replicate_data:
        whole = shard_corpus(corpus, 1, C, cfg.seed)[0]
        shards = [Shard(i, whole.tokens, whole.epoch_shuffle_seed) for i in range(cfg.k)]
    else:
        shards = shard_corpus(corpus, cfg.k, C, cfg.seed)
    for s in shards:
        if len(s) <= C:
            raise ConfigError(
                f"shard of {len(s)} tokens cannot hold context length {C}", "corpus.length"
            )
    probe_spec = replace(cfg.corpus, length=cfg.probe_size + C, path=None)
    probe_tokens = _corpus(probe_spec, 1)
    idx = np.arange(cfg.probe_size)
    probe = Batch(
        probe_tokens[idx[:, None] + np.arange(C)[None, :]],
        probe_tokens[idx + C],
        model.vocab_size,
    )
    return StageData(shards, probe)


def _payload(cfg: StageConfig, param_count: int) -> int:
    return cfg.k * param_count * cfg.comm_bytes_per_element * 2


def _check_model(cfg: StageConfig, model: ModelSpec, theta: ParamVector) -> None:
    if cfg.corpus.vocab_size != model.vocab_size:
        raise ConfigError(
            f"corpus vocab {cfg.corpus.vocab_size} != model vocab {model.vocab_size}",
            "corpus.vocab_size",
        )
    if theta.layout != models.build_layout(model):
        raise ConfigError("initial parameters do not match the model spec", "model")


def _usable_carry(cfg: StageConfig, carry: Optional[StageCarry]) -> Optional[StageCarry]:
    if carry is None or not cfg.carry_state_across_stages:
        return None
    if carry.method != cfg.method or carry.k != cfg.k:
        return None
    return carry


# ---------------------------------------------------------------------------
# drift


def _as_params(w) -> ParamVector:
    return w.params if isinstance(w, WorkerState) else w


def drift_snapshot(
    workers: Sequence[Union[WorkerState, ParamVector]],
    theta: ParamVector,
    round_index: int = 0,
    step: int = 0,
) -> DriftRow:
    """Parameter-space divergence of worker replicas around ``theta``.

    Cosine entries are NaN where either delta has zero norm.
    """
    X = np.stack([_as_params(w).values for w in workers])
    D = X - theta.values
    k = X.shape[0]
    max_dist = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            diff = X[i] - X[j]
            max_dist = max(max_dist, float(np.sqrt(np.dot(diff, diff))))
    norms = np.sqrt(np.einsum("ij,ij->i", D, D))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (D @ D.T) / np.outer(norms, norms)
    cos[np.outer(norms, norms) == 0] = np.nan
    return DriftRow(round_index, step, max_dist, float(norms.mean()), cos)


# ---------------------------------------------------------------------------
# runners


def run_sync_stage(
    theta0: ParamVector,
    cfg: StageConfig,
    model: ModelSpec,
    carry: Optional[StageCarry] = None,
    observer: Optional[Callable[[int, ParamVector], None]] = None,
) -> tuple[ParamVector, RunReport]:
    """Fully synchronous data parallelism: average k gradients every step.

    ``observer(step, theta)`` is called after every parameter update.
    """
    if cfg.method != "sync":
        raise ConfigError("run_sync_stage needs method 'sync'", "method")
    _check_model(cfg, model, theta0)
    t0 = time.perf_counter()
    data = prepare_stage_data(cfg, model)
    carry = _usable_carry(cfg, carry)
    state = carry.inner_states[0] if carry else init_inner_state(cfg.inner, theta0.layout)
    cursors = list(carry.cursors) if carry else [0] * cfg.k
    payload = _payload(cfg, len(theta0))
    ledger = CommLedger()
    theta = theta0
    rows = [LossRow(0, None, None, models.loss(theta, data.probe, model))]
    for step in range(1, cfg.steps + 1):
        total = None
        worker_losses = []
        for w in range(cfg.k):
            batch, cursors[w] = next_batch(
                data.shards[w], cursors[w], cfg.batch_size, model.context_length, model.vocab_size
            )
            value, g = models.loss_and_grad(theta, batch, model)
            worker_losses.append(value)
            total = g.values.copy() if total is None else total + g.values
        avg = ParamVector(theta.layout, total / cfg.k)
        theta, state = inner_step(theta, avg, state, with_lr(cfg.inner, cfg.lr_factor(step)))
        ledger.record(step, payload, "grad-allreduce")
        if observer is not None:
            observer(step, theta)
        for w, value in enumerate(worker_losses):
            rows.append(LossRow(step, w, value, None))
        rows.append(
            LossRow(step, None, sum(worker_losses) / cfg.k, models.loss(theta, data.probe, model))
        )
    report = RunReport(
        stage=cfg.name,
        method="sync",
        k=cfg.k,
        steps=cfg.steps,
        H=None,
        param_count=len(theta0),
        initial_digest=theta0.digest(),
        final_digest=theta.digest(),
        losses=rows,
        ledger=ledger,
        drift=DriftReport(),
        rounds=[],
        wall_time=time.perf_counter() - t0,
        carry=StageCarry("sync", cfg.k, [state], cursors),
    )
    return theta, report


def run_diloco_stage(
    theta0: ParamVector,
    cfg: StageConfig,
    model: ModelSpec,
    carry: Optional[StageCarry] = None,
    observer: Optional[Callable[[int, ParamVector], None]] = None,
) -> tuple[ParamVector, RunReport]:
    """Inner-outer training: H local steps per worker, then one outer step.

    ``observer(step, theta)`` is called after every synchronization.
    """
    if cfg.method != "diloco":
        raise ConfigError("run_diloco_stage needs method 'diloco'", "method")
    _check_model(cfg, model, theta0)
    t0 = time.perf_counter()
    data = prepare_stage_data(cfg, model)
    carry = _usable_carry(cfg, carry)
    layout = theta0.layout
    workers = [
        WorkerState(
            worker_id=i,
            params=theta0,
            inner_state=carry.inner_states[i] if carry else init_inner_state(cfg.inner, layout),
            shard=data.shards[i],
            cursor=carry.cursors[i] if carry else 0,
            rng=Rng(derive_seed(cfg.seed, "worker"), i),
        )
        for i in range(cfg.k)
    ]
    outer = OuterState.from_config(layout, cfg.outer)
    if carry and carry.outer_v is not None:
        outer = OuterState(carry.outer_v, outer.mu, outer.eta, outer.nesterov)
    payload = _payload(cfg, len(theta0))
    ledger = CommLedger()
    drift = DriftReport()
    rounds = []
    theta = theta0
    rows = [LossRow(0, None, None, models.loss(theta, data.probe, model))]
    step = 0
    round_index = 0
    while step < cfg.steps:
        h = min(cfg.H, cfg.steps - step)
        for w in workers:
            p = theta
            st = w.inner_state
            for i in range(1, h + 1):
                batch, w.cursor = next_batch(
                    w.shard, w.cursor, cfg.batch_size, model.context_length, model.vocab_size
                )
                value, g = models.loss_and_grad(p, batch, model)
                p, st = inner_step(p, g, st, with_lr(cfg.inner, cfg.lr_factor(step + i)))
                rows.append(LossRow(step + i, w.worker_id, value, None))
            w.params = p
            w.inner_state = st
        step += h
        row = drift_snapshot(workers, theta, round_index, step)
        theta, outer, deltas = outer_step_from_replicas(theta, [w.params for w in workers], outer)
        ledger.record(step, payload, "delta-allreduce")
        for w in workers:
            w.params = theta
            if cfg.reset_inner_state_on_sync:
                w.inner_state = init_inner_state(cfg.inner, layout)
        row.post_sync_max_distance = drift_snapshot(workers, theta).max_pairwise_distance
        if observer is not None:
            observer(step, theta)
        drift.rows.append(row)
        avg = deltas[0].values.copy()
        for d in deltas[1:]:
            avg += d.values
        rounds.append(
            SyncRound(round_index, h, deltas, ParamVector(layout, avg / len(deltas)), payload)
        )
        rows.append(LossRow(step, None, None, models.loss(theta, data.probe, model)))
        round_index += 1
    report = RunReport(
        stage=cfg.name,
        method="diloco",
        k=cfg.k,
        steps=cfg.steps,
        H=cfg.H,
        param_count=len(theta0),
        initial_digest=theta0.digest(),
        final_digest=theta.digest(),
        losses=rows,
        ledger=ledger,
        drift=drift,
        rounds=rounds,
        wall_time=time.perf_counter() - t0,
        carry=StageCarry(
            "diloco",
            cfg.k,
            [w.inner_state for w in workers],
            [w.cursor for w in workers],
            outer.v,
        ),
    )
    return theta, report


def run_stage(theta0, cfg: StageConfig, model: ModelSpec, carry=None, observer=None):
    runner = run_sync_stage if cfg.method == "sync" else run_diloco_stage
    return runner(theta0, cfg, model, carry, observer)


def run_hybrid_schedule(
    stages: Sequence[StageConfig], theta0: ParamVector, model: ModelSpec
) -> tuple[ParamVector, list]:
    """Run stages in order, feeding each stage's output into the next.

    Optimizer state (outer momentum, inner moments, data cursors) starts
    fresh at every boundary unless the receiving stage sets
    ``carry_state_across_stages`` and uses the same method and k.
    """
    if not stages:
        raise ConfigError("at least one stage is required", "stages")
    for i, st in enumerate(stages):
        if st.corpus.vocab_size != model.vocab_size:
            raise ConfigError(
                f"corpus vocab {st.corpus.vocab_size} != model vocab {model.vocab_size}",
                f"stages[{i}].corpus.vocab_size",
            )
    theta = theta0
    reports = []
    carry = None
    for st in stages:
        theta, report = run_stage(theta, st, model, carry)
        carry = report.carry
        reports.append(report)
    return theta, reports


def communication_ratio(ledger_sync: CommLedger, ledger_diloco: CommLedger) -> float:
    """Total synchronous bytes divided by total DiLoCo bytes."""
    if not ledger_sync.events or not ledger_diloco.events:
        raise ValueError("communication_ratio needs two non-empty ledgers")
    return ledger_sync.total_bytes / ledger_diloco.total_bytes
