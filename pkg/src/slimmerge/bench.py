"""Synthetic experiments: allocator comparison and task similarity vs shared rank."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .baselines import allocate_energy, allocate_random, allocate_uniform
from .decompose import decompose
from .ranks import RankProblem, RankSearchConfig, optimize_ranks
from .store import SyntheticSpec, TaskVectorSet, generate_synthetic


def desk_suite(seed: int, similarity: float = 0.5) -> SyntheticSpec:
    """Four tasks over four mixed-shape layers with uneven layer scales."""
    rng = np.random.default_rng(1000 + seed)
    scales = [float(x) for x in np.round(np.exp(rng.uniform(-1.0, 1.0, 4)), 3)]
    return SyntheticSpec(T=4, L=4, dims=[(64, 48), (48, 48), (96, 32), (32, 64)], shared_rank=6,
                         expert_rank=4, similarity=similarity, noise_sigma=0.01, seed=seed,
                         layer_scales=scales, decay=0.8)


def cosine_similarity(tvs: TaskVectorSet, i: int, j: int) -> float:
    """Cosine between two flattened task vectors (all layers concatenated)."""
    a = np.concatenate([lm.data.ravel() for lm in tvs.tasks[i][1].values()])
    b = np.concatenate([lm.data.ravel() for lm in tvs.tasks[j][1].values()])
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def shared_rank_ratio(alloc) -> float:
    """Fraction of all allocated rank that goes to the shared component."""
    total = sum(alloc.rounded.values())
    if total == 0:
        return 0.0
    return sum(r for (c, _), r in alloc.rounded.items() if c == "shared") / total


@dataclass
class BenchConfig:
    suites: int = 10
    random_seeds: int = 5
    R_target: float = 0.1
    similarities: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    similarity_seeds: int = 3
    similarity_R_target: float = 0.3
    seed: int = 0


def compare_allocators(specs: Sequence[SyntheticSpec], config: RankSearchConfig, random_seeds: int = 5) -> list[dict]:
    """Hard-truncation task loss of each allocator at the optimized allocation's achieved ratio."""
    rows = []
    for spec in specs:
        dec = decompose(generate_synthetic(spec))
        prob = RankProblem(dec)
        slim = optimize_ranks(dec, prob.svds, config, prob).allocation
        budget = slim.achieved_ratio
        energy = allocate_energy(prob.svds, prob.dims, budget)
        uniform = allocate_uniform(prob.keys, prob.dims, budget)
        randoms = [allocate_random(prob.keys, prob.dims, budget, seed=s) for s in range(random_seeds)]
        loss = lambda a: prob.hard_task_loss(a.rounded, config.loss_kind)
        rows.append({
            "seed": spec.seed,
            "R_target": config.R_target,
            "slim_ratio": budget,
            "slim_loss": loss(slim),
            "energy_ratio": energy.achieved_ratio,
            "energy_loss": loss(energy),
            "uniform_ratio": uniform.achieved_ratio,
            "uniform_loss": loss(uniform),
            "random_ratio_mean": float(np.mean([a.achieved_ratio for a in randoms])),
            "random_loss_mean": float(np.mean([loss(a) for a in randoms])),
        })
    return rows


def similarity_study(similarities: Sequence[float], seeds: int, config: RankSearchConfig,
                     base: SyntheticSpec | None = None) -> dict:
    """Pairwise cosine vs optimized shared-rank fraction over two-task sets."""
    base = base or SyntheticSpec(T=2, L=3, dims=[(48, 32)] * 3, shared_rank=4, expert_rank=4, noise_sigma=0.01)
    rows = []
    for sim in similarities:
        for seed in range(seeds):
            tvs = generate_synthetic(replace(base, T=2, similarity=float(sim), seed=seed))
            alloc = optimize_ranks(decompose(tvs), None, config).allocation
            rows.append({"similarity": float(sim), "seed": seed, "cosine": cosine_similarity(tvs, 0, 1),
                         "shared_rank_ratio": shared_rank_ratio(alloc), "achieved_ratio": alloc.achieved_ratio})
    rho = spearmanr([r["cosine"] for r in rows], [r["shared_rank_ratio"] for r in rows]).statistic
    return {"rows": rows, "spearman": float(rho)}


def run_bench(bench: BenchConfig, config: RankSearchConfig) -> dict:
    specs = [desk_suite(bench.seed + s) for s in range(bench.suites)]
    comp = compare_allocators(specs, replace(config, R_target=bench.R_target), bench.random_seeds)
    study = similarity_study(bench.similarities, bench.similarity_seeds,
                             replace(config, R_target=bench.similarity_R_target))
    slim = np.array([r["slim_loss"] for r in comp])
    return {
        "allocators": comp,
        "allocator_summary": {
            "slim_over_energy_max": float(np.max(slim / [r["energy_loss"] for r in comp])),
            "slim_over_random_max": float(np.max(slim / [r["random_loss_mean"] for r in comp])),
            "max_budget_gap": float(max(abs(r["slim_ratio"] - bench.R_target) for r in comp)),
        },
        "similarity": study,
    }
