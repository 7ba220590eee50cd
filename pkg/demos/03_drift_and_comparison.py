"""Sync vs DiLoCo vs hybrid on a reduced version of the default schedule.

Prints the probe-loss trajectory of each variant per stage, the pre-sync
replica drift of the DiLoCo base stage, and the communication ratio.
Pass ``--full`` to run configs/default.yaml unchanged (about a minute).
"""

import sys
from dataclasses import replace
from pathlib import Path

from diloco_desk.config import load_config
from diloco_desk.experiment import compare_variants, comparison_summary

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "default.yaml")
if "--full" not in sys.argv:
    shrink = {"base": (400, 50), "mid": (120, 30), "sft": (120, 30)}
    cfg = replace(cfg, stages=tuple(
        replace(s, steps=shrink[s.name][0], H=shrink[s.name][1]) for s in cfg.stages
    ))

results = compare_variants(cfg)
summary = comparison_summary(results)

print("final probe loss per stage")
for variant, info in summary["variants"].items():
    cells = "  ".join(f"{s['name']}={s['final_probe_loss']:.4f}" for s in info["stages"])
    print(f"  {variant:7s} {'/'.join(info['methods']):20s} {cells}")

base = results["diloco"][1][0]
print("\nDiLoCo base-stage drift (pre-sync max pairwise L2, mean delta norm, post-sync):")
for row in base.drift.rows:
    print(f"  round {row.round_index:2d} step {row.step:4d}: {row.max_pairwise_distance:.4f}  "
          f"{row.mean_delta_norm:.4f}  {row.post_sync_max_distance}")

print("\ncommunication ratio (sync bytes / DiLoCo bytes):")
for stage, ratio in summary["communication_ratio"].items():
    print(f"  {stage}: {ratio:g}")
print(f"  total: {summary['communication_ratio_total']:.2f}, "
      f"hybrid total: {summary['hybrid_communication_ratio_total']:.2f}")
