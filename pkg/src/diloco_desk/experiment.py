"""Run a configured schedule, or the three-way sync / DiLoCo / hybrid comparison."""

from __future__ import annotations

import logging
from dataclasses import replace

from .config import RunConfig
from .engine import ConfigError, StageConfig, communication_ratio, run_hybrid_schedule
from .models import init_params

__all__ = ["VARIANTS", "execute", "variant_stages", "compare_variants", "comparison_summary"]

log = logging.getLogger(__name__)

VARIANTS = ("sync", "diloco", "hybrid")


def execute(cfg: RunConfig, stages=None):
    """Run ``stages`` (default: the configured ones) from the seeded init."""
    theta0 = init_params(cfg.model)
    stages = cfg.stages if stages is None else stages
    for st in stages:
        log.info("stage %s: method=%s k=%d steps=%d H=%s", st.name, st.method, st.k, st.steps, st.H)
    return run_hybrid_schedule(stages, theta0, cfg.model)


def _as_sync(st: StageConfig) -> StageConfig:
    return replace(
        st,
        method="sync",
        H=None,
        outer=None,
        reset_inner_state_on_sync=False,
        allow_partial_round=False,
    )


def variant_stages(cfg: RunConfig, variant: str) -> tuple:
    """Stage list for one comparison variant.

    The configured stages must all be DiLoCo stages; ``sync`` converts every
    stage, ``hybrid`` keeps only the first stage as DiLoCo.
    """
    for i, st in enumerate(cfg.stages):
        if st.method != "diloco":
            raise ConfigError(
                "compare expects every stage to be a diloco stage (it derives the sync variants)",
                f"stages[{i}].method",
            )
    if variant == "diloco":
        return tuple(cfg.stages)
    if variant == "sync":
        return tuple(_as_sync(st) for st in cfg.stages)
    if variant == "hybrid":
        return (cfg.stages[0],) + tuple(_as_sync(st) for st in cfg.stages[1:])
    raise ValueError(f"unknown variant {variant!r}")


def compare_variants(cfg: RunConfig) -> dict:
    """Run all three variants from the same initial parameters.

    Returns ``{variant: (final_params, reports)}``.
    """
    plans = {v: variant_stages(cfg, v) for v in VARIANTS}
    out = {}
    for variant, stages in plans.items():
        log.info("variant %s", variant)
        out[variant] = execute(cfg, stages)
    return out


def comparison_summary(results: dict) -> dict:
    """JSON-ready digest of a three-way comparison (no timing information)."""
    variants = {}
    for variant, (theta, reports) in results.items():
        variants[variant] = {
            "methods": [r.method for r in reports],
            "initial_digest": reports[0].initial_digest,
            "final_digest": theta.digest(),
            "total_comm_bytes": sum(r.ledger.total_bytes for r in reports),
            "stages": [
                {
                    "name": r.stage,
                    "method": r.method,
                    "H": r.H,
                    "final_probe_loss": r.final_probe_loss(),
                    "comm_bytes": r.ledger.total_bytes,
                    "comm_events": r.ledger.count(),
                    "drift": drift_summary(r),
                }
                for r in reports
            ],
        }
    sync_reports = results["sync"][1]
    diloco_reports = results["diloco"][1]
    ratios = {
        s.stage: communication_ratio(s.ledger, d.ledger)
        for s, d in zip(sync_reports, diloco_reports)
    }
    sync_total = variants["sync"]["total_comm_bytes"]
    return {
        "initial_digests": {v: variants[v]["initial_digest"] for v in variants},
        "communication_ratio": ratios,
        "communication_ratio_total": sync_total / variants["diloco"]["total_comm_bytes"],
        "hybrid_communication_ratio_total": sync_total / variants["hybrid"]["total_comm_bytes"],
        "variants": variants,
    }


def drift_summary(report) -> dict:
    rows = report.drift.rows
    if not rows:
        return {"rounds": 0}
    pre = [r.max_pairwise_distance for r in rows]
    return {
        "rounds": len(rows),
        "max_pre_sync_distance": max(pre),
        "mean_pre_sync_distance": sum(pre) / len(pre),
        "min_pre_sync_distance": min(pre),
        "max_post_sync_distance": max(r.post_sync_max_distance for r in rows),
        "mean_delta_norm": sum(r.mean_delta_norm for r in rows) / len(rows),
    }
