"""Dynamic composition of merged parameters under a router.

``theta*(x) = theta_0 + A_s B_s + sum_t w_t(x) A_t B_t``. Only the ideal
(one-hot, task-identity) router is modelled; explicit weight vectors are
accepted for experimentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .decompose import SvdTriple, hard_truncate, svd
from .errors import DimMismatch, MissingFactor, TaskOutOfRange
from .refine import FactorPair
from .store import Checkpoint, LayerMatrix

Key = tuple[str, str]


@dataclass
class RoutingWeights:
    w: np.ndarray
    mode: str = "explicit"
    task_id: int | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not np.all(np.isfinite(self.w)):
            raise ValueError("routing weights must be finite")
        if self.mode == "ideal_one_hot":
            if self.task_id is None or np.count_nonzero(self.w) != 1 or self.w[self.task_id] != 1.0:
                raise ValueError("ideal routing weights must be one-hot at task_id")


def ideal_route(task_id: int, T: int) -> RoutingWeights:
    if not 0 <= task_id < T:
        raise TaskOutOfRange(f"task {task_id} outside [0, {T})")
    w = np.zeros(T)
    w[task_id] = 1.0
    return RoutingWeights(w, "ideal_one_hot", task_id)


@dataclass
class MergedModel:
    layers: dict[str, LayerMatrix]
    provenance: dict = field(default_factory=dict)

    def as_checkpoint(self, model_id: str = "merged") -> Checkpoint:
        return Checkpoint(self.layers, {"model_id": model_id, "T_hint": None})


def _weights(weights, T: int) -> np.ndarray:
    w = weights.w if isinstance(weights, RoutingWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (T,):
        raise DimMismatch("<weights>", (T,), w.shape)
    return w


def merged_delta(factors: Mapping[Key, FactorPair], task_ids: Sequence[str], layer: str, w: np.ndarray,
                 shape: tuple[int, int]) -> np.ndarray:
    """``A_s B_s + sum_t w_t A_t B_t`` for one layer."""
    if ("shared", layer) not in factors:
        raise MissingFactor("shared", layer)
    fs = factors[("shared", layer)]
    if (fs.A.shape[0], fs.B.shape[1]) != tuple(shape):
        raise DimMismatch(layer, tuple(shape), (fs.A.shape[0], fs.B.shape[1]))
    delta = fs.product()
    for t, tid in enumerate(task_ids):
        if (tid, layer) not in factors:
            raise MissingFactor(tid, layer)
        ft = factors[(tid, layer)]
        if (ft.A.shape[0], ft.B.shape[1]) != tuple(shape):
            raise DimMismatch(layer, tuple(shape), (ft.A.shape[0], ft.B.shape[1]))
        if w[t] != 0.0:
            delta = delta + w[t] * ft.product()
    return delta


def compose(base: Checkpoint, factors: Mapping[Key, FactorPair], task_ids: Sequence[str],
            weights: RoutingWeights | Sequence[float], provenance: dict | None = None) -> MergedModel:
    """Dense merged parameters; ``base`` is left untouched."""
    w = _weights(weights, len(task_ids))
    layers = {}
    for name, lm in base.layers.items():
        if ("shared", name) not in factors:
            # layers outside the merge keep their base values
            layers[name] = LayerMatrix(name, lm.data.copy(), lm.kind)
            continue
        layers[name] = LayerMatrix(name, lm.data + merged_delta(factors, task_ids, name, w, lm.shape), lm.kind)
    prov = {"base_id": base.meta.get("model_id"), "weights": [float(x) for x in w]}
    if isinstance(weights, RoutingWeights):
        prov["routing"] = weights.mode
    prov.update(provenance or {})
    return MergedModel(layers, prov)


# --------------------------------------------------------------------------
# adapter (LoRA) space


def factored_svd(A: np.ndarray, B: np.ndarray) -> SvdTriple:
    """SVD of ``A @ B`` from its factors, without forming the m x n product.

    Returns ``min(m, n, r)`` components, where ``r`` is the inner dimension.
    """
    m, r = A.shape
    n = B.shape[1]
    if r == 0:
        k = min(m, n, 0)
        return SvdTriple(np.zeros((m, k)), np.zeros(k), np.zeros((n, k)))
    qa, ra = np.linalg.qr(A)
    qb, rb = np.linalg.qr(B.T)
    core = svd(ra @ rb.T)
    U = qa @ core.U
    V = qb @ core.V
    k = min(m, n, U.shape[1])
    return SvdTriple(U[:, :k], core.S[:k], V[:, :k])


def _truncated_pair(triple: SvdTriple, r: int) -> tuple[np.ndarray, np.ndarray]:
    r = min(int(r), triple.k)
    root = np.sqrt(triple.S[:r])
    return triple.U[:, :r] * root, (triple.V[:, :r] * root).T


def peft_decompose(adapters: Sequence[Mapping[str, tuple[np.ndarray, np.ndarray]]]) -> dict[Key, SvdTriple]:
    """Shared/expert SVDs computed directly from per-task LoRA factors.

    ``adapters[t][layer] = (A_t, B_t)`` with ``LoRA_t = A_t @ B_t``. The shared
    adapter is the average ``[A_1 .. A_T] [B_1; ..; B_T] / T`` and each expert is
    ``[A_t, A_cat] [B_t; -B_cat / T]``.
    """
    T = len(adapters)
    task_ids = [f"task{t}" for t in range(T)]
    out = {}
    for layer in adapters[0]:
        dims = {(a.shape[0], b.shape[1]) for a, b in (ad[layer] for ad in adapters)}
        if len(dims) != 1:
            raise DimMismatch(layer, "one shape across adapters", sorted(dims))
        A_cat = np.concatenate([ad[layer][0] for ad in adapters], axis=1)
        B_cat = np.concatenate([ad[layer][1] for ad in adapters], axis=0) / T
        out[("shared", layer)] = factored_svd(A_cat, B_cat)
        for tid, ad in zip(task_ids, adapters):
            A_t, B_t = ad[layer]
            out[(tid, layer)] = factored_svd(np.concatenate([A_t, A_cat], axis=1),
                                             np.concatenate([B_t, -B_cat], axis=0))
    return out


def peft_compose(adapters: Sequence[Mapping[str, tuple[np.ndarray, np.ndarray]]], ranks: Mapping[Key, int],
                 weights: RoutingWeights | Sequence[float]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Merged adapter ``LoRA* = M~_s + sum_t w_t M~_t`` in factored form.

    Truncation is hard at ``ranks[(component, layer)]`` (components
    ``"shared"``, ``"task0"``, ...). The backbone never enters.
    """
    T = len(adapters)
    w = _weights(weights, T)
    triples = peft_decompose(adapters)
    merged = {}
    for layer in adapters[0]:
        A_s, B_s = _truncated_pair(triples[("shared", layer)], ranks[("shared", layer)])
        As, Bs = [A_s], [B_s]
        for t in range(T):
            if w[t] == 0.0:
                continue
            A_t, B_t = _truncated_pair(triples[(f"task{t}", layer)], ranks[(f"task{t}", layer)])
            As.append(w[t] * A_t)
            Bs.append(B_t)
        merged[layer] = (np.concatenate(As, axis=1), np.concatenate(Bs, axis=0))
    return merged


def full_pipeline_delta(base: Checkpoint, fine_tuned: Sequence[Checkpoint], ranks: Mapping[Key, int],
                        weights: RoutingWeights | Sequence[float]) -> dict[str, np.ndarray]:
    """Dense route: diff -> average/residual -> SVD -> hard truncation -> compose; returns ``theta* - theta_0``."""
    from .decompose import decompose
    from .store import TaskVectorSet, diff

    tvs = TaskVectorSet([(f"task{t}", diff(ck, base)) for t, ck in enumerate(fine_tuned)], dict(base.meta))
    dec = decompose(tvs)
    factors = {}
    for comp in dec.components():
        for layer in dec.layer_names:
            triple = svd(dec.matrix(comp, layer))
            r = min(int(ranks[(comp, layer)]), triple.k)
            trunc = hard_truncate(triple, r)
            factors[(comp, layer)] = FactorPair(trunc, np.eye(trunc.shape[1]), comp, layer)
    merged = compose(base, factors, dec.task_ids, weights)
    return {name: merged.layers[name].data - base.layers[name].data for name in dec.layer_names}
