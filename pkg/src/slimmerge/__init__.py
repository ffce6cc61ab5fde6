"""Slim dynamic model merging with differentiable rank allocation."""

import os as _os

# Thread count for the BLAS backend; must be set before numpy loads.
if _os.environ.get("SLIMMERGE_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["SLIMMERGE_THREADS"])

__version__ = "0.1.0"

from .accounting import BitBreakdown, ModuleGeom, bits_cost, budget_ratio  # noqa: E402
from .baselines import allocate_energy, allocate_random, allocate_uniform  # noqa: E402
from .compose import MergedModel, RoutingWeights, compose, ideal_route, peft_compose  # noqa: E402
from .decompose import Decomposition, SvdTriple, decompose, expert_residual, hard_truncate, shared_merge, svd  # noqa: E402
from .ranks import (RankAllocation, RankSearchConfig, compression_ratio, grad_rank, optimize_ranks,  # noqa: E402
                    scale_budget, smooth_truncate, soft_reconstruct, task_loss, total_loss)
from .refine import FactorPair, RefineConfig, grad_factors, init_factors, refine, refine_loss  # noqa: E402
from .store import (Checkpoint, LayerMatrix, SyntheticSpec, TaskVectorSet, diff, generate_synthetic,  # noqa: E402
                    load_set, save_set)

__all__ = [
    "BitBreakdown", "ModuleGeom", "bits_cost", "budget_ratio",
    "allocate_energy", "allocate_random", "allocate_uniform",
    "MergedModel", "RoutingWeights", "compose", "ideal_route", "peft_compose",
    "Decomposition", "SvdTriple", "decompose", "expert_residual", "hard_truncate", "shared_merge", "svd",
    "RankAllocation", "RankSearchConfig", "compression_ratio", "grad_rank", "optimize_ranks", "scale_budget",
    "smooth_truncate", "soft_reconstruct", "task_loss", "total_loss",
    "FactorPair", "RefineConfig", "grad_factors", "init_factors", "refine", "refine_loss",
    "Checkpoint", "LayerMatrix", "SyntheticSpec", "TaskVectorSet", "diff", "generate_synthetic", "load_set",
    "save_set", "__version__",
]
