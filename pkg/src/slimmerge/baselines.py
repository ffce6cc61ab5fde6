"""Rank-allocation baselines: uniform, random and energy-threshold.

Each meets a budget in the ``R_now`` metric by bisecting one scalar knob
(rank fraction, random scale, or energy threshold) for the largest achieved
ratio that stays under the cap.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .decompose import SvdTriple
from .errors import InfeasibleBudget
from .ranks import RankAllocation, compression_ratio, round_rank

Key = tuple[str, str]


def _ratio(ranks: Mapping[Key, int], dims: Mapping[str, tuple[int, int]]) -> float:
    return compression_ratio(ranks, {key: dims[key[1]] for key in ranks})


def _check_budget(budget: float) -> None:
    if not budget > 0:
        raise InfeasibleBudget(f"budget must be > 0, got {budget}")


def _bisect(make: Callable[[float], dict[Key, int]], dims, lo: float, hi: float, cap: float,
            iters: int = 100) -> dict[Key, int]:
    """Largest-ratio allocation from a monotone knob with ratio <= cap."""
    best = make(lo)
    if _ratio(best, dims) > cap:
        raise InfeasibleBudget(f"even the smallest allocation exceeds the cap {cap:.4f}")
    top = make(hi)
    if _ratio(top, dims) <= cap:
        return top
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cand = make(mid)
        if _ratio(cand, dims) <= cap:
            lo, best = mid, cand
        else:
            hi = mid
    return best


def _as_alloc(ranks: dict[Key, int], dims) -> RankAllocation:
    return RankAllocation.from_continuous({key: float(r) for key, r in ranks.items()}, dims)


def allocate_uniform(keys, dims: Mapping[str, tuple[int, int]], budget: float) -> RankAllocation:
    """Same rank fraction for every matrix: ``r = round(rho * k)``."""
    _check_budget(budget)
    keys = list(keys)

    def make(rho):
        return {key: round_rank(rho * min(dims[key[1]]), min(dims[key[1]])) for key in keys}

    return _as_alloc(_bisect(make, dims, 0.0, 1.0, budget * 1.02), dims)


def allocate_random(keys, dims: Mapping[str, tuple[int, int]], budget: float, seed: int = 0) -> RankAllocation:
    """Random per-matrix proportions, globally rescaled to the budget."""
    _check_budget(budget)
    keys = list(keys)
    rng = np.random.default_rng(seed)
    u = {key: float(x) for key, x in zip(keys, rng.uniform(0.0, 1.0, size=len(keys)))}
    umin = max(min(u.values()), 1e-6)

    def make(c):
        return {key: round_rank(c * u[key] * min(dims[key[1]]), min(dims[key[1]])) for key in keys}

    return _as_alloc(_bisect(make, dims, 0.0, 1.0 / umin, budget + 0.02), dims)


def energy_rank(S: np.ndarray, eta: float) -> int:
    """Smallest r with cumulative energy fraction ``sum_{i<=r} s_i^2 / sum s_i^2 >= eta``."""
    e = np.asarray(S, dtype=np.float64) ** 2
    total = e.sum()
    if total <= 0 or eta <= 0:
        return 0
    frac = np.cumsum(e) / total
    # guard against the last cumulative sum landing a hair under 1.0
    frac[-1] = 1.0
    return int(np.searchsorted(frac, min(eta, 1.0) - 1e-15, side="left") + 1)


def allocate_energy(svds: Mapping[Key, SvdTriple], dims: Mapping[str, tuple[int, int]], budget: float,
                    pooled: bool = False) -> RankAllocation:
    """Energy-threshold ranks with one global threshold bisected to the budget.

    With ``pooled=True`` all expert matrices of a layer share one rank chosen
    from their summed spectra.
    """
    _check_budget(budget)
    keys = list(svds)
    spectra = {key: svds[key].S for key in keys}
    if pooled:
        by_layer: dict[str, np.ndarray] = {}
        for (comp, layer), S in spectra.items():
            if comp != "shared":
                by_layer[layer] = by_layer.get(layer, 0) + S ** 2
        spectra = {key: (np.sqrt(by_layer[key[1]]) if key[0] != "shared" else S) for key, S in spectra.items()}

    def make(eta):
        return {key: energy_rank(spectra[key], eta) for key in keys}

    return _as_alloc(_bisect(make, dims, 0.0, 1.0, budget + 0.02), dims)
