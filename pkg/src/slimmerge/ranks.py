"""Differentiable rank allocation over shared and expert matrices.

Every (component, layer) matrix keeps its frozen SVD; a continuous rank ``r``
reweights singular value ``i`` (1-based) by ``0.5 * tanh(beta * (r - i)) + 0.5``.
The ranks are optimized against the task reconstruction loss plus
``gamma * |R_now - R_target|``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .decompose import Decomposition, SvdTriple, svd_all
from .errors import ConfigError, DimMismatch, NonFinite

LOSS_KINDS = ("mse", "l1")

# Per model family: loss, beta, gamma, lr1, lr2.
FAMILY_DEFAULTS = {
    "vision": {"loss_kind": "mse", "beta": 20.0, "gamma": 300.0, "lr1": 0.2, "lr2": 0.001},
    "llm": {"loss_kind": "l1", "beta": 30.0, "gamma": 500.0, "lr1": 0.2, "lr2": 0.001},
    "peft": {"loss_kind": "mse", "beta": 20.0, "gamma": 100.0, "lr1": 0.2, "lr2": 0.001},
    "mllm": {"loss_kind": "l1", "beta": 50.0, "gamma": 500.0, "lr1": 0.2, "lr2": 0.001},
}


def truncation_gate(k: int, r: float, beta: float) -> np.ndarray:
    i = np.arange(1, k + 1, dtype=np.float64)
    return 0.5 * np.tanh(beta * (r - i)) + 0.5


def truncation_gate_grad(k: int, r: float, beta: float) -> np.ndarray:
    """d gate_i / d r = 0.5 * beta * sech^2(beta * (r - i))."""
    i = np.arange(1, k + 1, dtype=np.float64)
    return 0.5 * beta / np.cosh(np.clip(beta * (r - i), -350.0, 350.0)) ** 2


def smooth_truncate(S: np.ndarray, r: float, beta: float) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    return S * truncation_gate(S.shape[0], r, beta)


def soft_reconstruct(triple: SvdTriple, r: float, beta: float) -> np.ndarray:
    return (triple.U * smooth_truncate(triple.S, r, beta)) @ triple.V.T


def _entry_loss(err: np.ndarray, loss_kind: str) -> float:
    if loss_kind == "mse":
        return float(np.sum(err * err))
    if loss_kind == "l1":
        return float(np.sum(np.abs(err)))
    raise ConfigError("loss_kind", f"must be one of {LOSS_KINDS}, got {loss_kind!r}")


def task_loss(reconstructed: Sequence[Mapping[str, np.ndarray]], originals: Sequence[Mapping[str, np.ndarray]],
              loss_kind: str = "mse") -> float:
    """``(1/T) sum_t sum_l ||tau~ - tau||`` (squared Frobenius or entrywise L1)."""
    if len(reconstructed) != len(originals):
        raise DimMismatch("<tasks>", len(originals), len(reconstructed))
    total = 0.0
    for rec, orig in zip(reconstructed, originals):
        for name, tau in orig.items():
            approx = np.asarray(rec[name], dtype=np.float64)
            if approx.shape != np.shape(tau):
                raise DimMismatch(name, np.shape(tau), approx.shape)
            total += _entry_loss(approx - tau, loss_kind)
    return total / len(originals)


def compression_ratio(ranks, dims) -> float:
    """``sum_l r_l (m_l + n_l) / sum_l m_l n_l``.

    ``ranks`` and ``dims`` are either aligned sequences or mappings with the
    same keys.
    """
    if isinstance(ranks, Mapping):
        keys = list(ranks)
        r = np.array([ranks[k] for k in keys], dtype=np.float64)
        d = np.array([dims[k] for k in keys], dtype=np.float64).reshape(-1, 2)
    else:
        r = np.asarray(ranks, dtype=np.float64).reshape(-1)
        d = np.asarray(dims, dtype=np.float64).reshape(-1, 2)
    return float(np.sum(r * (d[:, 0] + d[:, 1])) / np.sum(d[:, 0] * d[:, 1]))


def total_loss(task_loss_value: float, r_now: float, r_target: float, gamma: float) -> float:
    return task_loss_value + gamma * abs(r_now - r_target)


def grad_rank(triple: SvdTriple, r: float, beta: float, offset: np.ndarray, target: np.ndarray,
              loss_kind: str = "mse", weight: float = 1.0, gamma: float = 0.0, ratio_slope: float = 0.0,
              ratio_rest: float = 0.0, r_target: float = 0.0) -> float:
    """Analytic ``dL/dr`` for a single matrix's continuous rank.

    The objective is ``weight * loss(soft_reconstruct(r) + offset - target)
    + gamma * |ratio_rest + ratio_slope * r - r_target|``, where
    ``ratio_slope = (m + n) / sum(m n)`` and ``ratio_rest`` is the ratio
    contributed by all other ranks.
    """
    err = soft_reconstruct(triple, r, beta) + offset - target
    if loss_kind == "mse":
        g_err = 2.0 * err
    elif loss_kind == "l1":
        g_err = np.sign(err)
    else:
        raise ConfigError("loss_kind", f"must be one of {LOSS_KINDS}, got {loss_kind!r}")
    # <G, U diag(d sigma~/dr) V^T> = sum_i (u_i^T G v_i) * sigma_i * gate'_i
    proj = np.einsum("mi,mn,ni->i", triple.U, g_err, triple.V)
    g = weight * float(np.sum(proj * triple.S * truncation_gate_grad(triple.k, r, beta)))
    gap = ratio_rest + ratio_slope * r - r_target
    if gap != 0:
        g += gamma * math.copysign(ratio_slope, gap)
    return g


# --------------------------------------------------------------------------
# configuration and results


@dataclass
class RankSearchConfig:
    loss_kind: str = "mse"
    beta: float = 20.0
    gamma: float = 300.0
    R_target: float = 0.1
    lr1: float = 0.2
    max_iters: int = 500
    seed: int = 0
    optimizer: str = "gd"
    ratio_mode: str = "pooled"
    normalize_loss: bool = True
    tol: float = 1e-8
    patience: int = 20
    lr_schedule: str = "cosine"
    init: str = "scaled"
    polish: bool = True

    @classmethod
    def for_family(cls, family: str, **overrides) -> "RankSearchConfig":
        if family not in FAMILY_DEFAULTS:
            raise ConfigError("family", f"must be one of {sorted(FAMILY_DEFAULTS)}")
        d = {k: v for k, v in FAMILY_DEFAULTS[family].items() if k != "lr2"}
        d.update(overrides)
        return cls(**d)

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError("loss_kind", f"must be one of {LOSS_KINDS}")
        if not self.gamma > 0:
            raise ConfigError("gamma", "must be > 0")
        if not self.beta > 0:
            raise ConfigError("beta", "must be > 0")
        if not 0 < self.R_target <= 1:
            raise ConfigError("R_target", "must lie in (0, 1]")
        if not self.lr1 > 0:
            raise ConfigError("lr1", "must be > 0")
        if self.max_iters < 0:
            raise ConfigError("max_iters", "must be >= 0")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError("optimizer", "must be 'gd' or 'adam'")
        if self.ratio_mode not in ("pooled", "per_matrix"):
            raise ConfigError("ratio_mode", "must be 'pooled' or 'per_matrix'")
        if self.lr_schedule not in ("cosine", "constant", "invsqrt"):
            raise ConfigError("lr_schedule", "must be 'cosine', 'constant' or 'invsqrt'")
        if self.init not in ("scaled", "budget", "full"):
            raise ConfigError("init", "must be 'scaled', 'budget' or 'full'")
        if not self.tol >= 0 or self.patience < 1:
            raise ConfigError("tol", "tol must be >= 0 and patience >= 1")
        if self.seed < 0:
            raise ConfigError("seed", "must be unsigned")


Key = tuple[str, str]


@dataclass
class RankAllocation:
    continuous: dict[Key, float]
    rounded: dict[Key, int]
    achieved_ratio: float
    dims: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def max_ranks(self) -> dict[Key, int]:
        return {key: min(self.dims[key[1]]) for key in self.continuous}

    @classmethod
    def from_continuous(cls, continuous: Mapping[Key, float], dims: Mapping[str, tuple[int, int]]) -> "RankAllocation":
        cont = {}
        rounded = {}
        for key, r in continuous.items():
            k = min(dims[key[1]])
            cont[key] = float(r)
            rounded[key] = round_rank(r, k)
        ratio = compression_ratio(rounded, {key: dims[key[1]] for key in rounded})
        return cls(cont, rounded, ratio, dict(dims))

    def components(self) -> list[str]:
        return list(dict.fromkeys(c for c, _ in self.continuous))

    def layers(self) -> list[str]:
        return list(dict.fromkeys(l for _, l in self.continuous))

    def to_json(self) -> dict:
        return {
            "achieved_ratio": self.achieved_ratio,
            "dims": {name: list(d) for name, d in self.dims.items()},
            "ranks": [{"component": c, "layer": l, "continuous": self.continuous[(c, l)],
                       "rounded": self.rounded[(c, l)]} for c, l in self.continuous],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RankAllocation":
        dims = {name: tuple(d) for name, d in obj["dims"].items()}
        cont = {(e["component"], e["layer"]): float(e["continuous"]) for e in obj["ranks"]}
        alloc = cls.from_continuous(cont, dims)
        for e in obj["ranks"]:
            if "rounded" in e:
                alloc.rounded[(e["component"], e["layer"])] = int(e["rounded"])
        alloc.achieved_ratio = compression_ratio(alloc.rounded, {key: dims[key[1]] for key in alloc.rounded})
        return alloc


def round_rank(r: float, k: int) -> int:
    """Round half up, then clamp to [0, k]."""
    return int(min(max(math.floor(r + 0.5), 0), k))


def scale_budget(alloc: RankAllocation, factor: float) -> RankAllocation:
    """Multiply every continuous rank by ``factor``, re-round and re-clamp."""
    if not factor > 0:
        raise ConfigError("factor", "must be > 0")
    cont = {key: min(r * factor, float(min(alloc.dims[key[1]]))) for key, r in alloc.continuous.items()}
    return RankAllocation.from_continuous(cont, alloc.dims)


# --------------------------------------------------------------------------
# the joint objective


class RankProblem:
    """Frozen SVDs of all shared and expert matrices with vectorized loss/gradient.

    Parameters are ordered as ``keys``: the shared component for every layer,
    then each task for every layer.
    """

    def __init__(self, dec: Decomposition, svds: Mapping[Key, SvdTriple] | None = None):
        self.dec = dec
        self.svds = dict(svds) if svds is not None else svd_all(dec)
        self.layers = dec.layer_names
        self.task_ids = dec.task_ids
        self.T = dec.T
        self.keys: list[Key] = [(c, l) for c in dec.components() for l in self.layers]
        self.index = {key: i for i, key in enumerate(self.keys)}
        dims = dec.dims
        self.dims = dims
        self.k = np.array([min(dims[l]) for _, l in self.keys], dtype=np.float64)
        self.mpn = np.array([sum(dims[l]) for _, l in self.keys], dtype=np.float64)
        self.mn = np.array([dims[l][0] * dims[l][1] for _, l in self.keys], dtype=np.float64)
        self.total_mn = float(self.mn.sum())
        self.targets = dec.targets()
        # cross[(t, l)] = (U_s^T U_t) * (V_s^T V_t): couples shared/expert errors in the MSE.
        self.cross = {}
        for t, tid in enumerate(self.task_ids):
            for l in self.layers:
                s, e = self.svds[("shared", l)], self.svds[(tid, l)]
                self.cross[(t, l)] = (s.U.T @ e.U) * (s.V.T @ e.V)
        self._tables = {}
        self.energy = sum(float(np.sum(tau * tau)) for tgt in self.targets for tau in tgt.values()) / self.T

    # ---- parts
    def ratio(self, r: np.ndarray) -> float:
        return float(np.sum(r * self.mpn) / self.total_mn)

    def _gates(self, r):
        gates, dgates = [], []
        for i, key in enumerate(self.keys):
            k = self.svds[key].k
            gates.append(truncation_gate(k, r[i], self._beta))
            dgates.append(truncation_gate_grad(k, r[i], self._beta))
        return gates, dgates

    def task_loss_and_grad(self, r: np.ndarray, beta: float, loss_kind: str = "mse") -> tuple[float, np.ndarray]:
        self._beta = beta
        if loss_kind == "mse":
            return self._mse(r)
        return self._l1(r)

    def _mse(self, r):
        gates, dgates = self._gates(r)
        grad = np.zeros(len(self.keys))
        loss = 0.0
        T = self.T
        for l in self.layers:
            si = self.index[("shared", l)]
            S_s = self.svds[("shared", l)].S
            a_s = S_s * (gates[si] - 1.0)
            g_as = np.zeros_like(a_s)
            for t, tid in enumerate(self.task_ids):
                ti = self.index[(tid, l)]
                S_t = self.svds[(tid, l)].S
                a_t = S_t * (gates[ti] - 1.0)
                K = self.cross[(t, l)]
                Ka_t = K @ a_t
                loss += (a_s @ a_s + a_t @ a_t + 2.0 * a_s @ Ka_t) / T
                g_as += 2.0 * (a_s + Ka_t) / T
                g_at = 2.0 * (a_t + K.T @ a_s) / T
                grad[ti] = float(np.sum(g_at * S_t * dgates[ti]))
            grad[si] = float(np.sum(g_as * S_s * dgates[si]))
        return float(loss), grad

    def _l1(self, r):
        gates, dgates = self._gates(r)
        grad = np.zeros(len(self.keys))
        loss = 0.0
        T = self.T
        for l in self.layers:
            si = self.index[("shared", l)]
            s = self.svds[("shared", l)]
            rec_s = (s.U * (s.S * gates[si])) @ s.V.T
            g_s = np.zeros(s.k)
            for t, tid in enumerate(self.task_ids):
                ti = self.index[(tid, l)]
                e = self.svds[(tid, l)]
                err = rec_s + (e.U * (e.S * gates[ti])) @ e.V.T - self.targets[t][l]
                loss += float(np.sum(np.abs(err))) / T
                sg = np.sign(err) / T
                g_s += np.einsum("mi,mn,ni->i", s.U, sg, s.V)
                grad[ti] = float(np.sum(np.einsum("mi,mn,ni->i", e.U, sg, e.V) * e.S * dgates[ti]))
            grad[si] = float(np.sum(g_s * s.S * dgates[si]))
        return loss, grad

    def penalty_and_grad(self, r: np.ndarray, r_target: float, gamma: float, mode: str = "pooled"):
        if mode == "pooled":
            gap = self.ratio(r) - r_target
            return gamma * abs(gap), gamma * np.sign(gap) * self.mpn / self.total_mn
        per = r * self.mpn / self.mn - r_target
        n = len(self.keys)
        return gamma * float(np.sum(np.abs(per))) / n, gamma * np.sign(per) * self.mpn / self.mn / n

    def hard_layer_loss(self, layer: str, ranks: np.ndarray, loss_kind: str = "mse") -> float:
        """One layer's share of the task loss under hard truncation at integer ranks."""
        si = self.index[("shared", layer)]
        s = self.svds[("shared", layer)]
        rs = int(ranks[si])
        loss = 0.0
        if loss_kind == "mse":
            for t, tid in enumerate(self.task_ids):
                loss += self._hard_table(t, layer)[rs, int(ranks[self.index[(tid, layer)]])]
        else:
            rec_s = (s.U[:, :rs] * s.S[:rs]) @ s.V[:, :rs].T
            for t, tid in enumerate(self.task_ids):
                e = self.svds[(tid, layer)]
                rt = int(ranks[self.index[(tid, layer)]])
                err = rec_s + (e.U[:, :rt] * e.S[:rt]) @ e.V[:, :rt].T - self.targets[t][layer]
                loss += _entry_loss(err, loss_kind)
        return float(loss) / self.T

    def _hard_table(self, t: int, layer: str) -> np.ndarray:
        """table[rs, rt] = ||tau~_t - tau_t||^2 for shared rank rs and expert rank rt (hard truncation)."""
        key = (t, layer)
        if key not in self._tables:
            S_s = self.svds[("shared", layer)].S
            S_t = self.svds[(self.task_ids[t], layer)].S
            tail_s = np.concatenate([np.cumsum((S_s ** 2)[::-1])[::-1], [0.0]])
            tail_t = np.concatenate([np.cumsum((S_t ** 2)[::-1])[::-1], [0.0]])
            P = S_s[:, None] * self.cross[key] * S_t[None, :]
            cross = np.zeros((len(S_s) + 1, len(S_t) + 1))
            cross[:-1, :-1] = np.cumsum(np.cumsum(P[::-1, ::-1], axis=0), axis=1)[::-1, ::-1]
            self._tables[key] = tail_s[:, None] + tail_t[None, :] + 2.0 * cross
        return self._tables[key]

    def hard_task_loss(self, ranks: Mapping[Key, int] | np.ndarray, loss_kind: str = "mse") -> float:
        """Task loss with hard truncation at integer ranks."""
        if isinstance(ranks, Mapping):
            ranks = np.array([ranks[key] for key in self.keys], dtype=np.float64)
        return sum(self.hard_layer_loss(l, ranks, loss_kind) for l in self.layers)

    def hard_total_loss(self, ranks, config: "RankSearchConfig") -> float:
        """Objective value of an integer allocation, on the optimizer's loss scale."""
        if isinstance(ranks, Mapping):
            ranks = np.array([ranks[key] for key in self.keys], dtype=np.float64)
        lt = self.hard_task_loss(ranks, config.loss_kind) * self.loss_scale(config)
        return lt + self.penalty_and_grad(ranks, config.R_target, config.gamma, config.ratio_mode)[0]

    def loss_scale(self, config: "RankSearchConfig") -> float:
        if config.normalize_loss and self.energy > 0:
            return 1.0 / (self.energy if config.loss_kind == "mse" else self.l1_energy)
        return 1.0

    @property
    def l1_energy(self) -> float:
        return sum(float(np.sum(np.abs(tau))) for tgt in self.targets for tau in tgt.values()) / self.T

    def allocation(self, r: np.ndarray) -> RankAllocation:
        return RankAllocation.from_continuous({key: float(r[i]) for i, key in enumerate(self.keys)}, self.dims)


@dataclass
class RankSearchResult:
    allocation: RankAllocation
    trace: list[dict]
    iterations: int


def initial_ranks(prob: RankProblem, config: RankSearchConfig) -> np.ndarray:
    if config.init == "full":
        return prob.k.copy()
    if config.init == "budget":
        return np.clip(config.R_target * prob.mn / prob.mpn, 0.0, prob.k)
    return np.clip(config.R_target * prob.k, 0.0, prob.k)


def optimize_ranks(dec: Decomposition, svds: Mapping[Key, SvdTriple] | None, config: RankSearchConfig,
                   problem: RankProblem | None = None) -> RankSearchResult:
    """Gradient descent on all continuous ranks jointly, then round (and optionally polish)."""
    config.validate()
    prob = problem or RankProblem(dec, svds)
    r = initial_ranks(prob, config)
    scale = prob.loss_scale(config)
    m = np.zeros_like(r)
    v = np.zeros_like(r)
    trace = []
    prev = None
    quiet = 0
    it = 0
    for it in range(1, config.max_iters + 1):
        lt, g_task = prob.task_loss_and_grad(r, config.beta, config.loss_kind)
        pen, g_pen = prob.penalty_and_grad(r, config.R_target, config.gamma, config.ratio_mode)
        total = lt * scale + pen
        g = g_task * scale + g_pen
        if not (math.isfinite(total) and np.all(np.isfinite(g))):
            raise NonFinite(it)
        trace.append({"iteration": it - 1, "L_task": lt * scale, "R_now": prob.ratio(r), "L_total": total})
        lr = _lr_at(config, it)
        if config.optimizer == "adam":
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            step = lr * (m / (1 - 0.9 ** it)) / (np.sqrt(v / (1 - 0.999 ** it)) + 1e-8)
        else:
            step = lr * g
        r = np.clip(r - step, 0.0, prob.k)
        if prev is not None and abs(total - prev) < config.tol:
            quiet += 1
            if quiet >= config.patience:
                break
        else:
            quiet = 0
        prev = total
    alloc = prob.allocation(r)
    if config.polish:
        z = np.array([alloc.rounded[key] for key in prob.keys], dtype=np.float64)
        z = polish_ranks(prob, z, config)
        alloc = prob.allocation(z)
    return RankSearchResult(alloc, trace, it)


def polish_ranks(prob: RankProblem, z: np.ndarray, config: RankSearchConfig, max_passes: int = 200,
                 triple_limit: int = 40) -> np.ndarray:
    """Steepest-descent local search over integer ranks.

    Moves are single-rank steps of +-1 and swaps that raise one rank while
    lowering another (plus three-rank moves on small problems); each is
    scored with the exact hard-truncation objective.
    """
    z = z.copy()
    scale = prob.loss_scale(config)
    layer_of = [l for _, l in prob.keys]
    kmax = [int(k) for k in prob.k]
    # per-key ratio contribution of one rank unit
    if config.ratio_mode == "pooled":
        unit = [float(v) / prob.total_mn for v in prob.mpn]
    else:
        unit = [float(a) / float(b) for a, b in zip(prob.mpn, prob.mn)]
    n = len(z)
    gamma, target = config.gamma, config.R_target

    def penalty_of(contrib):
        if config.ratio_mode == "pooled":
            return gamma * abs(sum(contrib) - target)
        return gamma * sum(abs(c - target) for c in contrib) / n

    layer_loss = {l: prob.hard_layer_loss(l, z, config.loss_kind) for l in prob.layers}
    single = [((i, d),) for i in range(n) for d in (1, -1)]
    pairs = [((i, 1), (j, -1)) for i in range(n) for j in range(n) if i != j]
    triples = []
    if n <= triple_limit:
        triples = [((i, a), (j, a), (k, -a)) for i in range(n) for j in range(i + 1, n)
                   for k in range(n) if k not in (i, j) for a in (1, -1)]
    moves = single + pairs + triples
    current = scale * sum(layer_loss.values()) + prob.penalty_and_grad(z, target, gamma, config.ratio_mode)[0]
    for _ in range(max_passes):
        zi = [int(v) for v in z]
        contrib = [zi[i] * unit[i] for i in range(n)]
        base_pen = penalty_of(contrib)
        pooled_sum = sum(contrib)
        best_gain, best_move = 1e-12 * max(1.0, abs(current)), None
        cache: dict = {}
        for move in moves:
            if any(not 0 <= zi[i] + d <= kmax[i] for i, d in move):
                continue
            if config.ratio_mode == "pooled":
                pen = gamma * abs(pooled_sum + sum(d * unit[i] for i, d in move) - target)
            else:
                c2 = list(contrib)
                for i, d in move:
                    c2[i] += d * unit[i]
                pen = penalty_of(c2)
            cand = z.copy()
            for i, d in move:
                cand[i] += d
            delta = 0.0
            for l in {layer_of[i] for i, _ in move}:
                sig = tuple((i, d) for i, d in move if layer_of[i] == l)
                if sig not in cache:
                    cache[sig] = prob.hard_layer_loss(l, cand, config.loss_kind) - layer_loss[l]
                delta += cache[sig]
            gain = scale * -delta + base_pen - pen
            if gain > best_gain:
                best_gain, best_move = gain, cand
        if best_move is None:
            break
        z = best_move
        for l in prob.layers:
            layer_loss[l] = prob.hard_layer_loss(l, z, config.loss_kind)
        current = scale * sum(layer_loss.values()) + prob.penalty_and_grad(z, target, gamma, config.ratio_mode)[0]
    return z


def _lr_at(config: RankSearchConfig, it: int) -> float:
    if config.lr_schedule == "constant" or config.max_iters <= 1:
        return config.lr1
    if config.lr_schedule == "cosine":
        return config.lr1 * 0.5 * (1.0 + math.cos(math.pi * (it - 1) / config.max_iters))
    return config.lr1 / math.sqrt(it)


def write_trace(trace: Sequence[Mapping], path) -> None:
    if not trace:
        fields = ["iteration"]
    else:
        fields = list(trace[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(trace)
