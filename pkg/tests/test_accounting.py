import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slimmerge.accounting import (METHODS, BitBreakdown, ModuleGeom, allocation_from_averages, bits_cost,
                                  budget_ratio, comparison_table, load_geometry, ranks_from_allocation,
                                  write_table)
from slimmerge.errors import ConfigError, MissingParam
from slimmerge.ranks import RankAllocation, scale_budget

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
VIT = [ModuleGeom("in_proj", 768, 2304, 12), ModuleGeom("out_proj", 768, 768, 12),
       ModuleGeom("c_fc", 768, 3072, 12), ModuleGeom("c_proj", 3072, 768, 12)]
# published average ranks (shared, expert) at the small and medium budgets
AVG_S = {"in_proj": (18.3, 17.1), "out_proj": (16.1, 14.9), "c_fc": (13.0, 11.7), "c_proj": (8.9, 8.5)}
AVG_M = {"in_proj": (27.4, 26.1), "out_proj": (27.7, 26.4), "c_fc": (21.3, 19.7), "c_proj": (17.3, 16.7)}
# module-level averages from the coarser table, small then medium
COARSE = {"in_proj": (15, 25), "out_proj": (10, 17), "c_fc": (16, 27), "c_proj": (16, 27)}
BACKBONE = 87.8e6


def test_tall_mask_example():
    b = bits_cost("tall_mask", [ModuleGeom("w", 25, 40)], 8, {"R": 0})
    assert (b.shared_bits, b.expert_bits) == (32000, 8000)
    assert b.backbone_bits == 32000 and b.router_bits == 0


def test_slim_example():
    b = bits_cost("slim", [ModuleGeom("w", 768, 768)], 1, {"R": 0, "ranks": {"w": (16, [16])}})
    assert b.shared_bits == 786432 == 32 * 16 * 1536
    assert b.expert_bits == 786432


def test_emr_alpha_zero_is_mask_only():
    g = [ModuleGeom("w", 30, 50, 3)]
    emr = bits_cost("emr", g, 5, {"R": 7, "alpha": 0})
    tall = bits_cost("tall_mask", g, 5, {"R": 7})
    assert emr.expert_bits == tall.expert_bits == 5 * 1500 * 3
    # alpha = 0.01 adds 32 * 15 bits per task per module
    emr2 = bits_cost("emr", g, 5, {"R": 7, "alpha": 0.01})
    assert emr2.expert_bits - emr.expert_bits == 5 * 3 * 32 * 15


def test_static_and_tsv():
    g = [ModuleGeom("w", 10, 20, 2)]
    assert bits_cost("static", g, 4).total == 32 * 200 * 2
    tsv = bits_cost("tsv_c", g, 4, {"R": 1, "r_tsv": 3})
    assert tsv.shared_bits == 0 and tsv.expert_bits == 32 * 3 * 30 * 2 and tsv.router_bits == 32


def test_router_counted_once():
    one = bits_cost("tall_mask", VIT[:1], 8, {"R": 100})
    all_ = bits_cost("tall_mask", VIT, 8, {"R": 100})
    assert one.router_bits == all_.router_bits == 3200


def test_missing_params():
    g = [ModuleGeom("w", 4, 4)]
    with pytest.raises(MissingParam) as exc:
        bits_cost("slim", g, 2, {"R": 0})
    assert exc.value.name == "ranks"
    with pytest.raises(MissingParam):
        bits_cost("tall_mask", g, 2, {})
    with pytest.raises(MissingParam):
        bits_cost("emr", g, 2, {"R": 0})
    with pytest.raises(MissingParam):
        bits_cost("tsv_c", g, 2, {"R": 0})
    with pytest.raises(MissingParam):
        bits_cost("slim", g, 2, {"R": 0, "ranks": {"v": (1, [1, 1])}})


def test_bad_inputs():
    with pytest.raises(ConfigError):
        ModuleGeom("w", 0, 3)
    with pytest.raises(ConfigError):
        bits_cost("lora", [ModuleGeom("w", 2, 2)], 1)
    with pytest.raises(ConfigError):
        bits_cost("slim", [ModuleGeom("w", 2, 2)], 1, {"R": 0, "ranks": {"w": (1.5, [1])}})
    with pytest.raises(ValueError):
        BitBreakdown("static", -1, 0, 0, 0)


def test_per_instance_ranks():
    g = [ModuleGeom("w", 4, 6, 2)]
    b = bits_cost("slim", g, 1, {"R": 0, "ranks": {"w": {"instances": [(1, [2]), (3, [0])]}}})
    assert b.shared_bits == 32 * 4 * 10 and b.expert_bits == 32 * 2 * 10


@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 4), st.integers(1, 6),
       st.integers(0, 20), st.lists(st.integers(0, 20), min_size=6, max_size=6))
def test_slim_vs_tall_mask_inequality(d_in, d_out, count, T, r_s, r_t):
    g = [ModuleGeom("w", d_in, d_out, count)]
    r_t = r_t[:T]
    slim = bits_cost("slim", g, T, {"R": 0, "ranks": {"w": (r_s, r_t)}})
    tall = bits_cost("tall_mask", g, T, {"R": 0})
    # direct per-module formulas, independent of the evaluator
    lhs = 32 * (r_s + sum(r_t)) * (d_in + d_out)
    rhs = 32 * d_in * d_out + T * d_in * d_out
    assert slim.shared_bits + slim.expert_bits == lhs * count
    assert tall.shared_bits + tall.expert_bits == rhs * count
    assert (slim.total < tall.total) == (lhs < rhs)


def _alloc(geoms, T, r):
    cont = {(c, g.name): float(r) for c in ["shared", *[f"task{t}" for t in range(T)]] for g in geoms}
    return RankAllocation.from_continuous(cont, {g.name: (g.d_out, g.d_in) for g in geoms})


def test_ratio_zero_ranks_and_doubling():
    assert budget_ratio(_alloc(VIT, 8, 0), VIT, 8, BACKBONE) == 1.0
    r1 = budget_ratio(_alloc(VIT, 8, 5), VIT, 8, BACKBONE)
    r2 = budget_ratio(_alloc(VIT, 8, 10), VIT, 8, BACKBONE)
    assert r2 - 1 == pytest.approx(2 * (r1 - 1), rel=1e-12)


def test_ratio_slope():
    base = _alloc(VIT, 2, 4)
    for g in VIT:
        for comp in ("shared", "task1"):
            bumped = RankAllocation.from_continuous({**base.continuous, (comp, g.name): 5.0}, base.dims)
            slope = budget_ratio(bumped, VIT, 2, BACKBONE) - budget_ratio(base, VIT, 2, BACKBONE)
            assert slope == pytest.approx(g.count * g.width / BACKBONE, rel=1e-9)


def test_ratio_checks_T():
    with pytest.raises(ConfigError):
        budget_ratio(_alloc(VIT, 3, 1), VIT, 8, BACKBONE)
    with pytest.raises(ConfigError):
        budget_ratio(_alloc(VIT, 3, 1), VIT, 3, 0)


def test_published_small_budget():
    alloc = allocation_from_averages(VIT, AVG_S, 8)
    for use in ("continuous", "rounded"):
        assert budget_ratio(alloc, VIT, 8, BACKBONE, use=use) == pytest.approx(1.24, abs=0.06)


def test_published_medium_budget_is_lower_than_label():
    # the medium-budget averages land near 1.32, short of the 1.4 label
    r = budget_ratio(allocation_from_averages(VIT, AVG_M, 8), VIT, 8, BACKBONE, use="continuous")
    assert 1.30 <= r <= 1.34


def test_scale_budget_growth_matches_coarse_table():
    small = allocation_from_averages(VIT, AVG_S, 8)
    grown = scale_budget(small, 0.40 / 0.24)
    for g in VIT:
        for comp in small.components():
            assert grown.rounded[(comp, g.name)] > small.rounded[(comp, g.name)]
    # coarse table growth is 1.67 to 1.7 for every module; ours is the factor up to rounding
    for g in VIT:
        s_avg = np.mean([small.rounded[(c, g.name)] for c in small.components()])
        m_avg = np.mean([grown.rounded[(c, g.name)] for c in grown.components()])
        published = COARSE[g.name][1] / COARSE[g.name][0]
        assert abs(m_avg / s_avg - published) <= 0.1 * published
    extra = (budget_ratio(grown, VIT, 8, BACKBONE, "continuous") - 1) / \
        (budget_ratio(small, VIT, 8, BACKBONE, "continuous") - 1)
    assert extra == pytest.approx(0.40 / 0.24, rel=1e-9)


def test_ranks_from_allocation_feed_bits():
    alloc = _alloc(VIT, 8, 3)
    ranks = ranks_from_allocation(alloc)
    b = bits_cost("slim", VIT, 8, {"R": 0, "ranks": ranks})
    ratio = budget_ratio(alloc, VIT, 8, sum(g.P * g.count for g in VIT))
    assert (b.shared_bits + b.expert_bits) / b.backbone_bits == pytest.approx(ratio - 1, rel=1e-12)


def test_geometry_file_and_table(tmp_path):
    geo = load_geometry(CONFIGS / "vit_b32_geometry.json")
    assert [g.name for g in geo["geoms"]] == [g.name for g in VIT]
    assert geo["backbone_params"] == 87_800_000 and geo["T"] == 8
    rows = comparison_table(VIT, 8, {"R": 0, "ranks": ranks_from_allocation(_alloc(VIT, 8, 2))})
    assert [r["method"] for r in rows] == ["static", "tall_mask", "slim"]
    write_table(rows, tmp_path / "t.json")
    assert json.loads((tmp_path / "t.json").read_text())[2]["method"] == "slim"
    write_table(rows, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0].startswith("method,")
    assert set(METHODS) >= {r["method"] for r in rows}


def test_published_files_agree_with_constants():
    for name, avg in (("s", AVG_S), ("m", AVG_M)):
        obj = json.loads((CONFIGS / f"vit_b32_avg_ranks_{name}.json").read_text())
        alloc = RankAllocation.from_json(obj["allocation"])
        for mod, (rs, rt) in avg.items():
            assert alloc.continuous[("shared", mod)] == rs
            assert all(alloc.continuous[(f"task{t}", mod)] == rt for t in range(8))
