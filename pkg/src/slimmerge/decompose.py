"""Shared/expert split of task vectors and exact SVD with hard truncation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CoeffLenMismatch, ConvergenceError, DimMismatch, RankOutOfRange, SpecError
from .store import LayerMatrix, TaskVectorSet


@dataclass(frozen=True)
class SvdTriple:
    """Thin SVD ``M = U diag(S) V^T`` with ``k = min(m, n)`` columns."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def k(self) -> int:
        return self.S.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    def matrix(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


@dataclass
class Decomposition:
    shared: dict[str, LayerMatrix]
    experts: list[dict[str, LayerMatrix]]
    task_ids: list[str]

    @property
    def T(self) -> int:
        return len(self.experts)

    @property
    def layer_names(self) -> list[str]:
        return list(self.shared)

    @property
    def dims(self) -> dict[str, tuple[int, int]]:
        return {name: lm.shape for name, lm in self.shared.items()}

    def components(self) -> list[str]:
        return ["shared", *self.task_ids]

    def matrix(self, component: str, layer: str) -> np.ndarray:
        if component == "shared":
            return self.shared[layer].data
        return self.experts[self.task_ids.index(component)][layer].data

    def targets(self) -> list[dict[str, np.ndarray]]:
        """Recombined task vectors ``shared + expert_t``."""
        return [{name: self.shared[name].data + ex[name].data for name in self.shared} for ex in self.experts]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, LayerMatrix) else np.asarray(x, dtype=np.float64)


def shared_merge(tvs: TaskVectorSet, coefficients: Sequence[float] | None = None) -> dict[str, LayerMatrix]:
    """Static merge ``sum_t lambda_t tau_t``; plain averaging by default."""
    if coefficients is None:
        coefficients = [1.0 / tvs.T] * tvs.T
    if len(coefficients) != tvs.T:
        raise CoeffLenMismatch(f"got {len(coefficients)} coefficients for {tvs.T} tasks")
    out = {}
    for name in tvs.layer_names:
        acc = np.zeros(tvs.dims[name])
        for lam, (_, layers) in zip(coefficients, tvs.tasks):
            acc += lam * layers[name].data
        out[name] = LayerMatrix(name, acc, tvs.kinds[name])
    return out


def expert_residual(tvs: TaskVectorSet, shared: dict[str, LayerMatrix]) -> list[dict[str, LayerMatrix]]:
    """Per-task residuals ``tau_t - M_s``."""
    experts = []
    for _, layers in tvs.tasks:
        ex = {}
        for name, lm in layers.items():
            if name not in shared:
                raise DimMismatch(name, "present in shared", "missing")
            if shared[name].shape != lm.shape:
                raise DimMismatch(name, lm.shape, shared[name].shape)
            ex[name] = LayerMatrix(name, lm.data - shared[name].data, lm.kind)
        experts.append(ex)
    return experts


def decompose(tvs: TaskVectorSet, coefficients: Sequence[float] | None = None) -> Decomposition:
    shared = shared_merge(tvs, coefficients)
    return Decomposition(shared, expert_residual(tvs, shared), tvs.task_ids)


def svd(M) -> SvdTriple:
    """Thin SVD with a fixed sign convention.

    Each column of ``U`` has its first nonzero entry made nonnegative (the
    matching column of ``V`` is flipped with it). Wide matrices are
    transposed internally so the factorization always runs on the tall form.
    """
    a = _data(M)
    if a.ndim != 2:
        raise SpecError(f"svd expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SpecError("svd input has non-finite entries")
    wide = a.shape[0] < a.shape[1]
    work = a.T if wide else a
    try:
        u, s, vt = np.linalg.svd(work, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD did not converge: {exc}") from None
    v = vt.T
    if wide:
        u, v = v, u
    tol = 1e-12 * max(1.0, float(np.max(np.abs(u)))) if u.size else 0.0
    for j in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, j]) > tol)
        if nz.size and u[nz[0], j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return SvdTriple(np.ascontiguousarray(u), s, np.ascontiguousarray(v))


def hard_truncate(triple: SvdTriple, r: int) -> np.ndarray:
    """Best rank-``r`` approximation ``sum_{i<=r} s_i u_i v_i^T``."""
    if not 0 <= r <= triple.k or int(r) != r:
        raise RankOutOfRange(f"rank {r} outside [0, {triple.k}]")
    r = int(r)
    return (triple.U[:, :r] * triple.S[:r]) @ triple.V[:, :r].T


def svd_all(dec: Decomposition) -> dict[tuple[str, str], SvdTriple]:
    """SVD of every (component, layer) matrix."""
    return {(comp, layer): svd(dec.matrix(comp, layer)) for comp in dec.components() for layer in dec.layer_names}


def save_decomposition(dec: Decomposition, path, svds: dict | None = None, provenance=None) -> None:
    """Shared and expert matrices plus (optionally) their SVDs, all stored as float64."""
    from .store import write_container

    entries = []
    for comp in dec.components():
        for layer in dec.layer_names:
            kind = dec.shared[layer].kind
            entries.append(({"name": layer, "group": comp, "kind": kind, "dtype": "float64"},
                            dec.matrix(comp, layer)))
    for (comp, layer), tr in (svds or {}).items():
        for part, arr in (("U", tr.U), ("S", tr.S.reshape(1, -1)), ("V", tr.V)):
            entries.append(({"name": layer, "group": f"svd:{comp}:{part}", "dtype": "float64"}, arr))
    meta = {"task_ids": dec.task_ids, "layers": dec.layer_names}
    write_container(path, "decomposition", entries, meta, provenance)


def load_decomposition(path) -> tuple[Decomposition, dict | None, dict]:
    """Returns ``(decomposition, svds or None, manifest)``."""
    from .errors import FormatError
    from .store import read_container

    manifest, tensors = read_container(path, "decomposition")
    task_ids = manifest["meta"]["task_ids"]
    mats: dict = {}
    parts: dict = {}
    for entry, arr in tensors:
        group = entry["group"]
        if group.startswith("svd:"):
            _, comp, part = group.split(":")
            parts.setdefault((comp, entry["name"]), {})[part] = arr
        else:
            key = (group, entry["name"])
            if key in mats:
                raise FormatError(0, f"duplicate tensor {key}")
            mats[key] = LayerMatrix(entry["name"], arr, entry.get("kind", "other"))
    layers = manifest["meta"]["layers"]
    try:
        shared = {l: mats[("shared", l)] for l in layers}
        experts = [{l: mats[(tid, l)] for l in layers} for tid in task_ids]
    except KeyError as exc:
        raise FormatError(0, f"decomposition file lacks tensor {exc}") from None
    svds = None
    if parts:
        svds = {key: SvdTriple(p["U"], p["S"].reshape(-1), p["V"]) for key, p in parts.items()}
    return Decomposition(shared, experts, list(task_ids)), svds, manifest
