"""Data-free refinement of low-rank factor pairs against stored task vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .decompose import Decomposition, SvdTriple, svd
from .errors import ConfigError, MissingFactor, NonFinite, RankOutOfRange
from .ranks import RankAllocation

Key = tuple[str, str]


@dataclass
class FactorPair:
    """``M ~= A @ B`` with ``A`` m x r and ``B`` r x n."""

    A: np.ndarray
    B: np.ndarray
    component: str = "shared"
    layer: str = ""

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def product(self) -> np.ndarray:
        return self.A @ self.B

    def copy(self) -> "FactorPair":
        return FactorPair(self.A.copy(), self.B.copy(), self.component, self.layer)


@dataclass
class RefineConfig:
    lr2: float = 0.001
    max_iters: int = 1000
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    reg_lambda: float = 0.0
    weighting: str = "uniform"
    tau: float = 1.0
    seed: int = 0
    tol: float = 1e-9
    patience: int = 50

    def validate(self) -> None:
        if not self.lr2 > 0:
            raise ConfigError("lr2", "must be > 0")
        if self.max_iters < 0:
            raise ConfigError("max_iters", "must be >= 0")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("adam_betas", "each must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps", "must be > 0")
        if self.reg_lambda < 0:
            raise ConfigError("reg_lambda", "must be >= 0")
        if self.weighting not in ("uniform", "temperature"):
            raise ConfigError("weighting", "must be 'uniform' or 'temperature'")
        if not self.tau > 0:
            raise ConfigError("tau", "must be > 0")
        if self.seed < 0:
            raise ConfigError("seed", "must be unsigned")


def init_factors(M0, r: int, component: str = "shared", layer: str = "") -> FactorPair:
    """Balanced split of the rank-``r`` truncated SVD: ``A = U sqrt(S)``, ``B = sqrt(S) V^T``."""
    triple = M0 if isinstance(M0, SvdTriple) else svd(M0)
    if not 0 <= r <= triple.k or int(r) != r:
        raise RankOutOfRange(f"rank {r} outside [0, {triple.k}]")
    r = int(r)
    root = np.sqrt(triple.S[:r])
    return FactorPair(triple.U[:, :r] * root, (triple.V[:, :r] * root).T.copy(), component, layer)


def random_factors(m: int, n: int, r: int, rng: np.random.Generator, component: str = "shared",
                   layer: str = "") -> FactorPair:
    """LoRA-style start: Gaussian ``A`` with std ``1/sqrt(r)``, zero ``B``."""
    A = rng.standard_normal((m, r)) / math.sqrt(r) if r else np.zeros((m, 0))
    return FactorPair(A, np.zeros((r, n)), component, layer)


def init_all(dec: Decomposition, alloc: RankAllocation, svds: Mapping[Key, SvdTriple] | None = None,
             random_init: bool = False, seed: int = 0) -> dict[Key, FactorPair]:
    """Factor pairs for every (component, layer) at the allocation's rounded ranks."""
    rng = np.random.default_rng(seed)
    out = {}
    for comp in dec.components():
        for layer in dec.layer_names:
            r = alloc.rounded[(comp, layer)]
            if random_init:
                m, n = dec.dims[layer]
                out[(comp, layer)] = random_factors(m, n, r, rng, comp, layer)
            else:
                src = svds[(comp, layer)] if svds is not None else dec.matrix(comp, layer)
                out[(comp, layer)] = init_factors(src, r, comp, layer)
    return out


def _check(factors: Mapping[Key, FactorPair], task_ids: Sequence[str], layers: Sequence[str]) -> None:
    for comp in ("shared", *task_ids):
        for layer in layers:
            if (comp, layer) not in factors:
                raise MissingFactor(comp, layer)


def _errors(factors, targets, task_ids):
    """E[t][layer] = A_s B_s + A_t B_t - tau_t."""
    layers = list(targets[0])
    shared = {l: factors[("shared", l)].product() for l in layers}
    return [{l: shared[l] + factors[(tid, l)].product() - targets[t][l] for l in layers}
            for t, tid in enumerate(task_ids)]


def per_task_losses(factors: Mapping[Key, FactorPair], targets: Sequence[Mapping[str, np.ndarray]],
                    task_ids: Sequence[str]) -> np.ndarray:
    _check(factors, task_ids, list(targets[0]))
    errs = _errors(factors, targets, task_ids)
    return np.array([sum(float(np.sum(e * e)) for e in errs[t].values()) for t in range(len(task_ids))])


def refine_loss(factors: Mapping[Key, FactorPair], targets: Sequence[Mapping[str, np.ndarray]],
                task_ids: Sequence[str], reg_lambda: float = 0.0,
                reg_targets: Mapping[Key, np.ndarray] | None = None,
                weights: Sequence[float] | None = None) -> float:
    """``(1/T) sum_t w_t sum_l ||A_s B_s + A_t B_t - tau_t||^2`` plus the optional pull toward ``reg_targets``."""
    ell = per_task_losses(factors, targets, task_ids)
    w = np.ones(len(task_ids)) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = float(np.dot(w, ell)) / len(task_ids)
    if reg_lambda > 0 and reg_targets is not None:
        for key, target in reg_targets.items():
            d = factors[key].product() - target
            loss += reg_lambda * float(np.sum(d * d))
    return loss


def grad_factors(factors: Mapping[Key, FactorPair], targets: Sequence[Mapping[str, np.ndarray]],
                 task_ids: Sequence[str], reg_lambda: float = 0.0,
                 reg_targets: Mapping[Key, np.ndarray] | None = None,
                 weights: Sequence[float] | None = None) -> dict[Key, tuple[np.ndarray, np.ndarray]]:
    """Closed-form gradients of :func:`refine_loss` w.r.t. every ``(A, B)``.

    With ``E = A_s B_s + A_t B_t - tau_t``: ``dA_t = (2 w_t / T) E B_t^T`` and
    ``dB_t = (2 w_t / T) A_t^T E``; the shared pair accumulates over tasks.
    """
    layers = list(targets[0])
    _check(factors, task_ids, layers)
    T = len(task_ids)
    w = np.ones(T) if weights is None else np.asarray(weights, dtype=np.float64)
    errs = _errors(factors, targets, task_ids)
    grads = {}
    for l in layers:
        fs = factors[("shared", l)]
        g_shared = np.zeros((fs.A.shape[0], fs.B.shape[1]))
        for t, tid in enumerate(task_ids):
            G = (2.0 * w[t] / T) * errs[t][l]
            g_shared += G
            ft = factors[(tid, l)]
            grads[(tid, l)] = (G @ ft.B.T, ft.A.T @ G)
        grads[("shared", l)] = (g_shared @ fs.B.T, fs.A.T @ g_shared)
    if reg_lambda > 0 and reg_targets is not None:
        for key, target in reg_targets.items():
            f = factors[key]
            D = 2.0 * reg_lambda * (f.product() - target)
            gA, gB = grads[key]
            grads[key] = (gA + D @ f.B.T, gB + f.A.T @ D)
    return grads


def temperature_weights(losses: np.ndarray, tau: float) -> np.ndarray:
    """``T * softmax(l_t / (mean(l) * tau))``; sums to T, uniform as tau grows."""
    losses = np.asarray(losses, dtype=np.float64)
    T = losses.shape[0]
    mean = float(losses.mean())
    if mean <= 0:
        return np.ones(T)
    z = losses / (mean * tau)
    z = np.exp(z - z.max())
    return T * z / z.sum()


@dataclass
class RefineResult:
    factors: dict[Key, FactorPair]
    trace: list[dict]
    initial_loss: float
    final_loss: float
    iterations: int = 0


def refine(factors: Mapping[Key, FactorPair], targets: Sequence[Mapping[str, np.ndarray]],
           task_ids: Sequence[str], config: RefineConfig | None = None,
           reg_targets: Mapping[Key, np.ndarray] | None = None) -> RefineResult:
    """Adam on all factor pairs jointly; returns the lowest-loss iterate.

    ``reg_targets`` defaults to the products of the starting factors.
    """
    config = config or RefineConfig()
    config.validate()
    T = len(task_ids)
    cur = {key: f.copy() for key, f in factors.items()}
    if config.reg_lambda > 0 and reg_targets is None:
        reg_targets = {key: f.product() for key, f in cur.items()}
    b1, b2 = config.adam_betas
    m = {key: (np.zeros_like(f.A), np.zeros_like(f.B)) for key, f in cur.items()}
    v = {key: (np.zeros_like(f.A), np.zeros_like(f.B)) for key, f in cur.items()}

    ell = per_task_losses(cur, targets, task_ids)
    initial = float(ell.sum()) / T
    best, best_loss = {key: f.copy() for key, f in cur.items()}, initial
    trace = [_trace_row(0, ell, task_ids)]
    prev = initial
    quiet = 0
    it = 0
    for it in range(1, config.max_iters + 1):
        w = temperature_weights(ell, config.tau) if config.weighting == "temperature" else None
        grads = grad_factors(cur, targets, task_ids, config.reg_lambda, reg_targets, w)
        c1 = 1.0 - b1 ** it
        c2 = 1.0 - b2 ** it
        for key, f in cur.items():
            gA, gB = grads[key]
            mA, mB = m[key]
            vA, vB = v[key]
            mA *= b1; mA += (1 - b1) * gA
            mB *= b1; mB += (1 - b1) * gB
            vA *= b2; vA += (1 - b2) * gA * gA
            vB *= b2; vB += (1 - b2) * gB * gB
            f.A -= config.lr2 * (mA / c1) / (np.sqrt(vA / c2) + config.adam_eps)
            f.B -= config.lr2 * (mB / c1) / (np.sqrt(vB / c2) + config.adam_eps)
        ell = per_task_losses(cur, targets, task_ids)
        loss = float(ell.sum()) / T
        if not math.isfinite(loss):
            raise NonFinite(it)
        trace.append(_trace_row(it, ell, task_ids))
        if loss < best_loss:
            best_loss = loss
            best = {key: f.copy() for key, f in cur.items()}
        if abs(prev - loss) <= config.tol * max(abs(loss), 1e-300):
            quiet += 1
            if quiet >= config.patience:
                break
        else:
            quiet = 0
        prev = loss
    return RefineResult(best, trace, initial, best_loss, it)


def _trace_row(it, ell, task_ids):
    row = {"iteration": it}
    for tid, value in zip(task_ids, ell):
        row[f"loss_{tid}"] = float(value)
    row["L_task"] = float(np.sum(ell)) / len(task_ids)
    return row


def save_factors(factors: Mapping[Key, FactorPair], task_ids: Sequence[str], path, meta=None,
                 provenance=None) -> None:
    """Factor pairs as float32 tensors (groups ``A:<component>`` / ``B:<component>``)."""
    from .store import write_container

    entries = []
    for (comp, layer), f in factors.items():
        # rank-0 factors are kept as explicit empty tensors via their shape fields
        entries.append(({"name": layer, "group": f"A:{comp}", "shape": list(f.A.shape)}, f.A.reshape(f.A.shape[0], -1)))
        entries.append(({"name": layer, "group": f"B:{comp}", "shape": list(f.B.shape)}, f.B.reshape(-1, f.B.shape[1])))
    write_container(path, "factors", entries, {**(meta or {}), "task_ids": list(task_ids)}, provenance)


def load_factors(path) -> tuple[dict[Key, FactorPair], list[str], dict]:
    from .store import read_container

    manifest, tensors = read_container(path, "factors")
    halves: dict = {}
    for entry, arr in tensors:
        side, comp = entry["group"].split(":", 1)
        halves.setdefault((comp, entry["name"]), {})[side] = arr.reshape(entry["shape"])
    factors = {key: FactorPair(h["A"], h["B"], key[0], key[1]) for key, h in halves.items()}
    return factors, list(manifest["meta"]["task_ids"]), manifest
