"""Bit-level storage accounting and the global budget ratio.

Floats are 32 bits, binary masks 1 bit. All bit counts are Python ints.
The router is a single global module of ``R`` parameters, counted once.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .errors import ConfigError, MissingParam
from .ranks import RankAllocation

METHODS = ("static", "tall_mask", "emr", "tsv_c", "slim")
FLOAT_BITS = 32


@dataclass(frozen=True)
class ModuleGeom:
    name: str
    d_in: int
    d_out: int
    count: int = 1

    def __post_init__(self):
        for f in ("d_in", "d_out", "count"):
            v = getattr(self, f)
            if int(v) != v or v < 1:
                raise ConfigError(f, f"must be a positive int, got {v!r}")

    @property
    def P(self) -> int:
        return self.d_in * self.d_out

    @property
    def width(self) -> int:
        return self.d_in + self.d_out


@dataclass(frozen=True)
class BitBreakdown:
    method: str
    backbone_bits: int
    router_bits: int
    shared_bits: int
    expert_bits: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}")
        for f in ("backbone_bits", "router_bits", "shared_bits", "expert_bits"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")

    @property
    def total(self) -> int:
        return self.backbone_bits + self.router_bits + self.shared_bits + self.expert_bits

    def to_dict(self) -> dict:
        return {**asdict(self), "total_bits": self.total}


def _need(params: Mapping, name: str):
    if name not in params or params[name] is None:
        raise MissingParam(name)
    return params[name]


def _int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 0:
        raise ConfigError(name, f"must be a nonnegative int, got {value!r}")
    return int(value)


def _module_ranks(ranks: Mapping, geom: ModuleGeom, T: int) -> tuple[int, int]:
    """(shared rank, summed expert rank) for one module type, over all its instances.

    ``ranks[name]`` is ``(r_s, [r_1..r_T])`` applied to every instance, or
    ``{"instances": [(r_s, [r_1..r_T]), ...]}`` with one pair per instance.
    """
    if geom.name not in ranks:
        raise MissingParam(f"ranks[{geom.name}]")
    entry = ranks[geom.name]
    if isinstance(entry, Mapping):
        per_instance = list(entry["instances"])
        if len(per_instance) != geom.count:
            raise ConfigError(f"ranks[{geom.name}]", f"needs {geom.count} instances, got {len(per_instance)}")
    else:
        per_instance = [entry] * geom.count
    rs_sum = rt_sum = 0
    for r_s, r_t in per_instance:
        if len(r_t) != T:
            raise ConfigError(f"ranks[{geom.name}]", f"needs {T} expert ranks, got {len(r_t)}")
        rs_sum += _int(r_s, f"ranks[{geom.name}]")
        rt_sum += sum(_int(r, f"ranks[{geom.name}]") for r in r_t)
    return rs_sum, rt_sum


def bits_cost(method: str, geoms: Sequence[ModuleGeom], T: int, params: Mapping | None = None) -> BitBreakdown:
    """Storage bits of one merging method over the given module geometry.

    ``params`` keys: ``R`` (router parameters; every method but ``static``),
    ``alpha`` (EMR scalar fraction), ``r_tsv`` (TSV-C rank) and ``ranks``
    (per module name, see :func:`_module_ranks`).
    """
    params = params or {}
    if method not in METHODS:
        raise ConfigError("method", f"must be one of {METHODS}, got {method!r}")
    T = _int(T, "T")
    backbone = sum(FLOAT_BITS * g.P * g.count for g in geoms)
    if method == "static":
        return BitBreakdown(method, backbone, 0, 0, 0)
    router = FLOAT_BITS * _int(_need(params, "R"), "R")
    if method == "tall_mask":
        return BitBreakdown(method, backbone, router, backbone, sum(T * g.P * g.count for g in geoms))
    if method == "emr":
        alpha = Fraction(str(_need(params, "alpha")))
        if not 0 <= alpha <= 1:
            raise ConfigError("alpha", "must lie in [0, 1]")
        experts = 0
        for g in geoms:
            # alpha * P rescaling scalars per task, rounded half up to a whole count
            scalars = int(alpha * g.P + Fraction(1, 2))
            experts += T * (g.P + FLOAT_BITS * scalars) * g.count
        return BitBreakdown(method, backbone, router, backbone, experts)
    if method == "tsv_c":
        r_tsv = _int(_need(params, "r_tsv"), "r_tsv")
        return BitBreakdown(method, backbone, router, 0, sum(FLOAT_BITS * r_tsv * g.width * g.count for g in geoms))
    ranks = _need(params, "ranks")
    shared = experts = 0
    for g in geoms:
        rs, rt = _module_ranks(ranks, g, T)
        shared += FLOAT_BITS * rs * g.width
        experts += FLOAT_BITS * rt * g.width
    return BitBreakdown(method, backbone, router, shared, experts)


def budget_ratio(alloc: RankAllocation, geoms: Sequence[ModuleGeom], T: int, backbone_total_params: float,
                 use: str = "rounded") -> float:
    """``1 + sum_modules count * (r_s + sum_t r_t)(d_in + d_out) / backbone``.

    Allocation layers are module names; components are ``"shared"`` plus the
    ``T`` task ids. ``use="continuous"`` reads the real-valued ranks (e.g.
    published averages) instead of the rounded ones.
    """
    if not backbone_total_params > 0:
        raise ConfigError("backbone_total_params", "must be > 0")
    ranks = alloc.rounded if use == "rounded" else alloc.continuous
    comps = alloc.components()
    experts = [c for c in comps if c != "shared"]
    if len(experts) != T:
        raise ConfigError("T", f"allocation has {len(experts)} expert components, expected {T}")
    extra = 0.0
    for g in geoms:
        per = ranks.get(("shared", g.name), 0) + sum(ranks[(c, g.name)] for c in experts)
        extra += g.count * per * g.width
    return 1.0 + extra / backbone_total_params


def allocation_from_averages(geoms: Sequence[ModuleGeom], averages: Mapping[str, tuple[float, float]],
                             T: int) -> RankAllocation:
    """Allocation with ``r_s`` and every ``r_t`` set to a module type's average ranks."""
    cont = {}
    for g in geoms:
        rs, rt = averages[g.name]
        cont[("shared", g.name)] = float(rs)
        for t in range(T):
            cont[(f"task{t}", g.name)] = float(rt)
    order = [("shared", g.name) for g in geoms] + [(f"task{t}", g.name) for t in range(T) for g in geoms]
    cont = {key: cont[key] for key in order}
    return RankAllocation.from_continuous(cont, {g.name: (g.d_out, g.d_in) for g in geoms})


def ranks_from_allocation(alloc: RankAllocation) -> dict[str, tuple[int, list[int]]]:
    """``{module: (r_s, [r_t ...])}`` from rounded ranks, for :func:`bits_cost`."""
    experts = [c for c in alloc.components() if c != "shared"]
    return {l: (alloc.rounded[("shared", l)], [alloc.rounded[(c, l)] for c in experts]) for l in alloc.layers()}


def load_geometry(path) -> dict:
    """Geometry JSON: ``{"modules": [{name, d_in, d_out, count}], "backbone_params": int, "T": int}``."""
    with open(path) as fh:
        obj = json.load(fh)
    if "modules" not in obj:
        raise ConfigError("modules", "geometry file needs a 'modules' list")
    geoms = [ModuleGeom(m["name"], int(m["d_in"]), int(m["d_out"]), int(m.get("count", 1))) for m in obj["modules"]]
    backbone = obj.get("backbone_params") or sum(g.P * g.count for g in geoms)
    return {"geoms": geoms, "backbone_params": backbone, "T": obj.get("T"),
            "router_params": obj.get("router_params", 0), "emr_alpha": obj.get("emr_alpha"),
            "tsv_rank": obj.get("tsv_rank")}


def comparison_table(geoms: Sequence[ModuleGeom], T: int, params: Mapping) -> list[dict]:
    """One row per method whose parameters are available, with each overhead over the backbone."""
    rows = []
    for method in METHODS:
        try:
            b = bits_cost(method, geoms, T, params)
        except MissingParam:
            continue
        row = b.to_dict()
        # everything beyond backbone and router, as a multiple of one model
        row["ratio_excl_router"] = 1.0 + (b.shared_bits + b.expert_bits) / b.backbone_bits if b.backbone_bits else None
        rows.append(row)
    return rows


def write_table(rows: Sequence[Mapping], path) -> None:
    """CSV or JSON depending on the suffix."""
    path = str(path)
    if path.endswith(".json"):
        with open(path, "w") as fh:
            json.dump(list(rows), fh, indent=2)
        return
    fields = list(rows[0]) if rows else ["method"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
