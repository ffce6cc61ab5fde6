#!/usr/bin/env python3
"""Storage comparison for ViT-B/32 from the published average ranks.

Reads the geometry and average-rank files in ``configs/`` and prints bits per
method, the budget ratio, and what the medium setting looks like when the
small allocation is scaled up.
"""

import argparse
import json
from pathlib import Path

from slimmerge.accounting import budget_ratio, comparison_table, load_geometry, ranks_from_allocation
from slimmerge.config import budget_factor
from slimmerge.ranks import RankAllocation, scale_budget

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def read(path):
    with open(path) as fh:
        return RankAllocation.from_json(json.load(fh)["allocation"])


def show(name, alloc, geo, params):
    T = geo["T"]
    for use in ("continuous", "rounded"):
        print(f"{name}: budget ratio ({use}) {budget_ratio(alloc, geo['geoms'], T, geo['backbone_params'], use):.4f}")
    rows = comparison_table(geo["geoms"], T, {**params, "ranks": ranks_from_allocation(alloc)})
    print(f"  {'method':<10} {'total bits':>14} {'overhead':>9}")
    for r in rows:
        print(f"  {r['method']:<10} {r['total_bits']:14d} {r['ratio_excl_router']:9.4f}")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--geometry", default=str(CONFIGS / "vit_b32_geometry.json"))
    p.add_argument("--small", default=str(CONFIGS / "vit_b32_avg_ranks_s.json"))
    p.add_argument("--medium", default=str(CONFIGS / "vit_b32_avg_ranks_m.json"))
    p.add_argument("--alpha", type=float, default=0.01, help="EMR scalar fraction")
    p.add_argument("--r-tsv", type=int, default=16)
    args = p.parse_args()

    geo = load_geometry(args.geometry)
    params = {"R": geo["router_params"], "alpha": args.alpha, "r_tsv": args.r_tsv}
    small, medium = read(args.small), read(args.medium)
    show("published small", small, geo, params)
    show("published medium", medium, geo, params)
    show("small scaled to medium", scale_budget(small, budget_factor("m")), geo, params)


if __name__ == "__main__":
    main()
