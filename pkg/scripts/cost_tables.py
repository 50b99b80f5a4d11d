#!/usr/bin/env python3
"""Analytic cost tables for the published model shapes.

Prints, for each architecture preset, the prefill FLOP budget with and
without visual-token pruning across a grid of retention rates, plus the
KV-cache footprint and a prune-layer sweep. Everything here is closed
form; nothing is executed, so the table is instant.

Pass --csv to get machine-readable rows instead of the aligned table.
"""

from __future__ import annotations

import argparse
import dataclasses

from vtprune.costmodel import (
    CSV_COLUMNS,
    PRESETS,
    analytic_report,
    kv_elements,
)

RETENTIONS = (0.04, 0.111, 0.25, 0.5, 1.0)


def table(preset_name: str, s_full: int) -> None:
    preset = PRESETS[preset_name]
    print(f"\n{preset.name}: L={preset.L} D={preset.D} H={preset.H} "
          f"ffn={preset.ffn_dim} K={preset.K}, Nv={s_full}")
    print(f"  {'keep':>6} {'S_pruned':>9} {'prefill TFLOPs':>15} "
          f"{'ratio':>7} {'KV M-elem':>10}")
    for r in RETENTIONS:
        s_pruned = max(1, round(s_full * r))
        rep = analytic_report(preset, s_full, s_pruned)
        print(f"  {r:>6.3f} {s_pruned:>9} {rep.prefill_flops_pruned / 1e12:>15.2f} "
              f"{rep.ratios['prefill']:>7.4f} {rep.kv_elements_pruned / 1e6:>10.1f}")
    base = analytic_report(preset, s_full, s_full)
    print(f"  baseline prefill: {base.prefill_flops_baseline / 1e12:.2f} TFLOPs, "
          f"KV {kv_elements(preset.L, s_full, preset.D) / 1e6:.1f} M-elem")


def k_sweep(preset_name: str, s_full: int, s_pruned: int) -> None:
    preset = PRESETS[preset_name]
    print(f"\n{preset.name}: prune-layer sweep at {s_full} -> {s_pruned} tokens")
    print(f"  {'K':>4} {'prefill TFLOPs':>15} {'ratio':>7}")
    for k in range(6, preset.L + 1, 6):
        variant = dataclasses.replace(preset, K=k)
        rep = analytic_report(variant, s_full, s_pruned)
        print(f"  {k:>4} {rep.prefill_flops_pruned / 1e12:>15.2f} "
              f"{rep.ratios['prefill']:>7.4f}")


def csv_dump(s_full: int) -> None:
    print(",".join(CSV_COLUMNS))
    for name, preset in PRESETS.items():
        for r in RETENTIONS:
            s_pruned = max(1, round(s_full * r))
            print(analytic_report(preset, s_full, s_pruned).csv_row())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tokens", type=int, default=5074,
                    help="full visual-token count before pruning")
    ap.add_argument("--csv", action="store_true")
    args = ap.parse_args()

    if args.csv:
        csv_dump(args.tokens)
        return
    for name in PRESETS:
        table(name, args.tokens)
    k_sweep("qwen2.5-vl-3b", 4500, 400)


if __name__ == "__main__":
    main()
