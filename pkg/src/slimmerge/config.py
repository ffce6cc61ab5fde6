"""Declarative run configuration (YAML) with per-family defaults."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from .bench import BenchConfig
from .errors import ConfigError, SpecError
from .ranks import FAMILY_DEFAULTS, RankSearchConfig
from .refine import RefineConfig
from .store import SyntheticSpec

# Global rank-scaling factors relative to the smallest (S) allocation:
# the overhead grows from 0.24 to 0.4 (M) and 1.0 (L) of one model.
BUDGET_FACTORS = {"s": 1.0, "m": 0.40 / 0.24, "l": 1.00 / 0.24}


def budget_factor(value) -> float:
    if isinstance(value, str) and value.lower() in BUDGET_FACTORS:
        return BUDGET_FACTORS[value.lower()]
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise ConfigError("budget", "must be s, m, l or a positive number") from None
    if not f > 0:
        raise ConfigError("budget", "must be > 0")
    return f


def _build(cls, data, section):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown field")
    if "dims" in data:
        data["dims"] = [tuple(d) for d in data["dims"]]
    if "adam_betas" in data:
        data["adam_betas"] = tuple(data["adam_betas"])
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from None


@dataclass
class RunConfig:
    family: str = "vision"
    seed: int = 0
    budget: str = "s"
    output_dir: str = "out"
    allocators: list = field(default_factory=lambda: ["uniform", "random", "energy"])
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    rank_search: RankSearchConfig = field(default_factory=RankSearchConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        top = {"family", "seed", "budget", "output_dir", "allocators", "synthetic", "rank_search", "refine", "bench"}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        family = data.get("family", "vision")
        if family not in FAMILY_DEFAULTS:
            raise ConfigError("family", f"must be one of {sorted(FAMILY_DEFAULTS)}")
        fam = FAMILY_DEFAULTS[family]
        rs = {k: v for k, v in fam.items() if k != "lr2"}
        rs.update(data.get("rank_search") or {})
        rf = {"lr2": fam["lr2"], **(data.get("refine") or {})}
        seed = data.get("seed", 0)
        rs.setdefault("seed", seed)
        rf.setdefault("seed", seed)
        syn = dict(data.get("synthetic") or {})
        syn.setdefault("seed", seed)
        cfg = cls(
            family=family,
            seed=seed,
            budget=str(data.get("budget", "s")),
            output_dir=str(data.get("output_dir", "out")),
            allocators=list(data.get("allocators", ["uniform", "random", "energy"])),
            synthetic=_build(SyntheticSpec, syn, "synthetic"),
            rank_search=_build(RankSearchConfig, rs, "rank_search"),
            refine=_build(RefineConfig, rf, "refine"),
            bench=_build(BenchConfig, data.get("bench"), "bench"),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                data = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError("<file>", f"not valid YAML: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("<file>", "top level must be a mapping")
        return cls.from_dict(data)

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be an unsigned int")
        budget_factor(self.budget)
        for a in self.allocators:
            if a not in ("uniform", "random", "energy"):
                raise ConfigError("allocators", f"unknown allocator {a!r}")
        try:
            self.synthetic.validate()
        except SpecError as exc:
            raise ConfigError("synthetic", str(exc)) from None
        self.rank_search.validate()
        self.refine.validate()
        b = self.bench
        if b.suites < 1 or b.random_seeds < 1 or b.similarity_seeds < 1:
            raise ConfigError("bench", "counts must be >= 1")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]
