"""Writers for run and comparison artifacts.

Floats in CSV files use 17 significant digits; JSON uses Python's
shortest round-trip repr. Neither ``summary.json`` nor
``comparison.json`` contains timing data, so both are byte-stable across
reruns of the same configuration; wall times go to ``timing.json``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .experiment import drift_summary

__all__ = [
    "LOSS_HEADER",
    "DRIFT_HEADER",
    "write_run",
    "write_comparison",
    "stage_summary",
    "fmt",
]

LOSS_HEADER = ["step", "stage", "method", "worker", "loss_train", "loss_probe"]
DRIFT_HEADER = [
    "stage",
    "round",
    "step",
    "max_pairwise_distance",
    "mean_delta_norm",
    "mean_delta_cosine",
    "min_delta_cosine",
    "post_sync_max_distance",
]


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def _json_value(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_value(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_value(v) for v in x]
    return x


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_value(obj), indent=2, sort_keys=True) + "\n")


def _loss_rows(report):
    rows = sorted(
        report.losses, key=lambda r: (r.step, r.worker is None, -1 if r.worker is None else r.worker)
    )
    for r in rows:
        yield [
            r.step,
            report.stage,
            report.method,
            "all" if r.worker is None else r.worker,
            fmt(r.loss_train),
            fmt(r.loss_probe),
        ]


def _cos_stats(mat: np.ndarray):
    k = mat.shape[0]
    if k < 2:
        return None, None
    off = mat[~np.eye(k, dtype=bool)]
    off = off[~np.isnan(off)]
    if off.size == 0:
        return float("nan"), float("nan")
    return float(off.mean()), float(off.min())


def stage_summary(report) -> dict:
    train = [r.loss_train for r in report.losses if r.worker is None and r.loss_train is not None]
    return {
        "name": report.stage,
        "method": report.method,
        "k": report.k,
        "steps": report.steps,
        "H": report.H,
        "param_count": report.param_count,
        "initial_digest": report.initial_digest,
        "final_digest": report.final_digest,
        "final_probe_loss": report.final_probe_loss(),
        "final_global_train_loss": train[-1] if train else None,
        "comm_events": report.ledger.count(),
        "comm_bytes": report.ledger.total_bytes,
        "drift": drift_summary(report),
    }


def write_run(out_dir, reports, seed: int, formats=("csv", "json"), config_digest: str = "") -> None:
    """Write ``loss_<stage>.csv``, ``drift.csv``, ``ledger.json``, ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "csv" in formats:
        for report in reports:
            with open(out / f"loss_{report.stage}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(LOSS_HEADER)
                w.writerows(_loss_rows(report))
        with open(out / "drift.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DRIFT_HEADER)
            for report in reports:
                for row in report.drift.rows:
                    mean_cos, min_cos = _cos_stats(row.delta_cosine)
                    w.writerow([
                        report.stage,
                        row.round_index,
                        row.step,
                        fmt(row.max_pairwise_distance),
                        fmt(row.mean_delta_norm),
                        fmt(mean_cos),
                        fmt(min_cos),
                        fmt(row.post_sync_max_distance),
                    ])
    if "json" in formats:
        events = []
        totals: dict = {}
        for report in reports:
            for e in report.ledger.events:
                events.append(
                    {"stage": report.stage, "step": e.step, "payload_bytes": e.payload_bytes,
                     "kind": e.kind}
                )
                totals[e.kind] = totals.get(e.kind, 0) + e.payload_bytes
        _write_json(out / "ledger.json", {
            "cost_model": "k * params * bytes_per_element * 2 per event",
            "events": events,
            "totals": totals,
            "total_bytes": sum(totals.values()),
            "per_stage": {r.stage: {"events": r.ledger.count(), "bytes": r.ledger.total_bytes}
                          for r in reports},
        })
        _write_json(out / "drift.json", {
            r.stage: [
                {
                    "round": row.round_index,
                    "step": row.step,
                    "max_pairwise_distance": row.max_pairwise_distance,
                    "mean_delta_norm": row.mean_delta_norm,
                    "delta_cosine": row.delta_cosine.tolist(),
                    "post_sync_max_distance": row.post_sync_max_distance,
                }
                for row in r.drift.rows
            ]
            for r in reports
        })
    _write_json(out / "summary.json", {
        "seed": seed,
        "config_digest": config_digest,
        "initial_digest": reports[0].initial_digest,
        "final_digest": reports[-1].final_digest,
        "total_comm_bytes": sum(r.ledger.total_bytes for r in reports),
        "stages": [stage_summary(r) for r in reports],
    })
    _write_json(out / "timing.json", {r.stage: r.wall_time for r in reports})


def write_comparison(out_dir, results: dict, summary: dict) -> None:
    """Joint probe-loss CSV plus ``comparison.json``.

    ``comparison.csv`` has one row per (stage, step) at which any variant
    evaluated the probe batch; variants without a value there are blank.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = list(results)
    table: dict = {}
    order: list = []
    for v in variants:
        for report in results[v][1]:
            for r in report.losses:
                if r.worker is None and r.loss_probe is not None:
                    key = (report.stage, r.step)
                    if key not in table:
                        table[key] = {}
                        order.append(key)
                    table[key][v] = r.loss_probe
    stage_rank = {r.stage: i for i, r in enumerate(results[variants[0]][1])}
    order.sort(key=lambda key: (stage_rank[key[0]], key[1]))
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "step"] + [f"loss_probe_{v}" for v in variants])
        for key in order:
            w.writerow([key[0], key[1]] + [fmt(table[key].get(v)) for v in variants])
    _write_json(out / "comparison.json", summary)
