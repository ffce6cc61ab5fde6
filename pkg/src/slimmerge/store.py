"""Checkpoints, task-vector sets, and their on-disk container.

A container file is laid out as::

    magic (8 bytes) | manifest length (uint64 LE) | manifest (UTF-8 JSON) | blob

The blob holds raw little-endian tensors back to back; the manifest records
each tensor's name, group, shape, dtype and byte offset into the blob.
Task vectors and checkpoints are stored as float32; other artifacts (SVD
caches) may use float64.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DimMismatch, FormatError, MissingLayer, SpecError

MAGIC = b"SLMGv1\x00\x00"
FORMAT_VERSION = 1
KINDS = ("attn_in", "attn_out", "mlp_fc", "mlp_proj", "other")
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


@dataclass
class LayerMatrix:
    """One weight (or weight-delta) matrix; computation happens in float64."""

    name: str
    data: np.ndarray
    kind: str = "other"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise SpecError(f"layer {self.name!r} must be a non-empty 2-D matrix, got shape {self.data.shape}")
        if self.kind not in KINDS:
            raise SpecError(f"layer {self.name!r} has unknown kind {self.kind!r}")

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "LayerMatrix":
        return LayerMatrix(self.name, data, self.kind)


@dataclass
class Checkpoint:
    layers: dict[str, LayerMatrix]
    meta: dict = field(default_factory=lambda: {"model_id": "model", "T_hint": None})

    def __post_init__(self):
        for name, lm in self.layers.items():
            if name != lm.name:
                raise SpecError(f"layer key {name!r} does not match layer name {lm.name!r}")
            if not np.all(np.isfinite(lm.data)):
                raise SpecError(f"layer {name!r} has non-finite entries")


@dataclass
class TaskVectorSet:
    """T task vectors sharing one layer layout."""

    tasks: list[tuple[str, dict[str, LayerMatrix]]]
    base_meta: dict = field(default_factory=lambda: {"model_id": "model", "T_hint": None})

    def __post_init__(self):
        if not self.tasks:
            raise SpecError("a task-vector set needs at least one task")
        ids = [tid for tid, _ in self.tasks]
        if len(set(ids)) != len(ids):
            raise SpecError(f"duplicate task ids in {ids}")
        if "shared" in ids:
            raise SpecError("'shared' is reserved and cannot be a task id")
        ref = self.tasks[0][1]
        for tid, layers in self.tasks[1:]:
            if list(layers) != list(ref):
                missing = set(ref) ^ set(layers)
                raise MissingLayer(sorted(missing)[0] if missing else f"order differs in task {tid!r}")
            for name, lm in layers.items():
                if lm.shape != ref[name].shape:
                    raise DimMismatch(name, ref[name].shape, lm.shape)

    @property
    def T(self) -> int:
        return len(self.tasks)

    @property
    def task_ids(self) -> list[str]:
        return [tid for tid, _ in self.tasks]

    @property
    def layer_names(self) -> list[str]:
        return list(self.tasks[0][1])

    @property
    def dims(self) -> dict[str, tuple[int, int]]:
        return {name: lm.shape for name, lm in self.tasks[0][1].items()}

    @property
    def kinds(self) -> dict[str, str]:
        return {name: lm.kind for name, lm in self.tasks[0][1].items()}

    def arrays(self) -> list[dict[str, np.ndarray]]:
        """Per-task mapping layer name -> float64 array."""
        return [{name: lm.data for name, lm in layers.items()} for _, layers in self.tasks]


def diff(fine_tuned: Checkpoint, base: Checkpoint) -> dict[str, LayerMatrix]:
    """Task vector ``fine_tuned - base``, layer by layer."""
    if set(fine_tuned.layers) != set(base.layers):
        missing = sorted(set(fine_tuned.layers) ^ set(base.layers))
        raise MissingLayer(missing[0])
    out = {}
    for name, ft in fine_tuned.layers.items():
        b = base.layers[name]
        if ft.shape != b.shape:
            raise DimMismatch(name, b.shape, ft.shape)
        out[name] = LayerMatrix(name, ft.data - b.data, ft.kind)
    return out


def task_vectors(base: Checkpoint, fine_tuned: Mapping[str, Checkpoint]) -> TaskVectorSet:
    return TaskVectorSet([(tid, diff(ck, base)) for tid, ck in fine_tuned.items()], dict(base.meta))


# --------------------------------------------------------------------------
# container I/O


def write_container(path, kind: str, entries: Iterable[tuple[dict, np.ndarray]], meta=None,
                    provenance=None) -> None:
    """Write tensors plus a JSON manifest. Each entry dict needs at least ``name``."""
    tensors = []
    chunks = []
    offset = 0
    for entry, array in entries:
        dtype_name = entry.get("dtype", "float32")
        arr = np.ascontiguousarray(np.asarray(array), dtype=_DTYPES[dtype_name])
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        raw = arr.tobytes()
        tensors.append({**entry, "dtype": dtype_name, "rows": int(arr.shape[0]),
                        "cols": int(arr.shape[1]), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "slimmerge", "version": FORMAT_VERSION, "kind": kind,
                "meta": meta or {}, "provenance": provenance or {}, "tensors": tensors,
                "blob_bytes": offset}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def read_container(path, expect_kind: str | None = None) -> tuple[dict, list[tuple[dict, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise FormatError(len(raw), "file shorter than the fixed header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(0, "bad magic")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    if start + hlen > len(raw):
        raise FormatError(start, "manifest runs past end of file")
    try:
        manifest = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(start, f"manifest is not valid JSON ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != "slimmerge":
        raise FormatError(start, "manifest is not a slimmerge manifest")
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise FormatError(start, f"expected a {expect_kind!r} file, got {manifest.get('kind')!r}")
    blob = start + hlen
    if len(raw) - blob != manifest.get("blob_bytes"):
        raise FormatError(len(raw), f"blob has {len(raw) - blob} bytes, manifest says {manifest.get('blob_bytes')}")
    out = []
    for entry in manifest["tensors"]:
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise FormatError(start, f"unsupported dtype {entry.get('dtype')!r}")
        rows, cols, off = entry["rows"], entry["cols"], entry["offset"]
        nbytes = rows * cols * dtype.itemsize
        if nbytes != entry["nbytes"] or off < 0 or blob + off + nbytes > len(raw):
            raise FormatError(blob + off, f"tensor {entry.get('name')!r} out of bounds")
        arr = np.frombuffer(raw, dtype=dtype, count=rows * cols, offset=blob + off).reshape(rows, cols)
        out.append((entry, arr.astype(np.float64)))
    return manifest, out


def _check_unique(names, offset):
    seen = set()
    for name in names:
        if name in seen:
            raise FormatError(offset, f"duplicate layer name {name!r}")
        seen.add(name)


def save_set(tvs: TaskVectorSet, path, provenance=None) -> None:
    entries = []
    for tid, layers in tvs.tasks:
        for name, lm in layers.items():
            entries.append(({"name": name, "group": tid, "kind": lm.kind}, lm.data))
    meta = {**tvs.base_meta, "task_ids": tvs.task_ids}
    write_container(path, "task_vectors", entries, meta, provenance)


def load_set(path) -> TaskVectorSet:
    manifest, tensors = read_container(path, "task_vectors")
    meta = dict(manifest["meta"])
    task_ids = meta.pop("task_ids", None)
    grouped: dict[str, dict[str, LayerMatrix]] = {}
    for entry, arr in tensors:
        grouped.setdefault(entry["group"], {})
        if entry["name"] in grouped[entry["group"]]:
            raise FormatError(len(MAGIC) + 8, f"duplicate layer name {entry['name']!r}")
        grouped[entry["group"]][entry["name"]] = LayerMatrix(entry["name"], arr, entry.get("kind", "other"))
    order = task_ids if task_ids is not None else list(grouped)
    if set(order) != set(grouped):
        raise FormatError(len(MAGIC) + 8, "task ids in meta disagree with tensor groups")
    try:
        return TaskVectorSet([(tid, grouped[tid]) for tid in order], meta)
    except SpecError as exc:
        raise FormatError(len(MAGIC) + 8, str(exc)) from None


def save_checkpoint(ck: Checkpoint, path, kind: str = "checkpoint", provenance=None) -> None:
    entries = [({"name": name, "group": "layers", "kind": lm.kind}, lm.data) for name, lm in ck.layers.items()]
    write_container(path, kind, entries, ck.meta, provenance)


def load_checkpoint(path, kind: str | None = "checkpoint") -> Checkpoint:
    manifest, tensors = read_container(path, kind)
    _check_unique([e["name"] for e, _ in tensors], len(MAGIC) + 8)
    layers = {e["name"]: LayerMatrix(e["name"], arr, e.get("kind", "other")) for e, arr in tensors}
    return Checkpoint(layers, dict(manifest["meta"]))


# --------------------------------------------------------------------------
# synthetic task vectors


@dataclass
class SyntheticSpec:
    """Planted shared + per-task low-rank structure.

    ``orthogonal`` draws every planted component from one orthonormal basis
    per layer (so different tasks' expert parts are exactly orthogonal); it
    needs ``shared_rank + T * expert_rank <= min(m, n)``. ``layer_scales``
    multiplies each layer's task vectors, ``decay`` makes planted singular
    values geometric (``decay**i``) instead of flat.
    """

    T: int = 4
    L: int = 3
    dims: list = field(default_factory=lambda: [(48, 32)] * 3)
    shared_rank: int = 4
    expert_rank: int = 2
    similarity: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0
    orthogonal: bool = False
    layer_scales: list | None = None
    decay: float = 1.0
    kinds: list | None = None

    def validate(self) -> None:
        if self.T < 1 or self.L < 1:
            raise SpecError("T and L must be >= 1")
        if len(self.dims) != self.L:
            raise SpecError(f"dims has {len(self.dims)} entries but L = {self.L}")
        if not 0.0 <= self.similarity <= 1.0:
            raise SpecError(f"similarity must lie in [0, 1], got {self.similarity}")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")
        if self.shared_rank < 0 or self.expert_rank < 0:
            raise SpecError("planted ranks must be >= 0")
        if not 0 < self.decay <= 1:
            raise SpecError("decay must lie in (0, 1]")
        if self.seed < 0:
            raise SpecError("seed must be unsigned")
        if self.layer_scales is not None and len(self.layer_scales) != self.L:
            raise SpecError("layer_scales needs one entry per layer")
        if self.kinds is not None and (len(self.kinds) != self.L or any(k not in KINDS for k in self.kinds)):
            raise SpecError("kinds needs one valid kind per layer")
        for m, n in self.dims:
            if m < 1 or n < 1:
                raise SpecError(f"layer dims must be positive, got {(m, n)}")
            need = self.shared_rank + (self.T if self.orthogonal else 1) * self.expert_rank
            if need > min(m, n):
                raise SpecError(f"planted rank {need} exceeds min(m, n) = {min(m, n)} for dims {(m, n)}")


def _unit_columns(rng, rows, cols):
    g = rng.standard_normal((rows, cols))
    norms = np.linalg.norm(g, axis=0)
    return g / np.where(norms == 0, 1.0, norms)


def generate_synthetic(spec: SyntheticSpec) -> TaskVectorSet:
    """Task vectors ``similarity * C + (1 - similarity) * D_t + noise``.

    Values are rounded to float32 so that a save/load round trip is exact.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = [f"layer{l}" for l in range(spec.L)]
    kinds = spec.kinds or ["other"] * spec.L
    scales = spec.layer_scales or [1.0] * spec.L
    per_task = [dict() for _ in range(spec.T)]
    rs, re = spec.shared_rank, spec.expert_rank
    s_shared = spec.decay ** np.arange(rs)
    s_expert = spec.decay ** np.arange(re)
    for l, (m, n) in enumerate(spec.dims):
        m, n = int(m), int(n)
        if spec.orthogonal:
            width = rs + spec.T * re
            qu = np.linalg.qr(rng.standard_normal((m, width)))[0] if width else np.zeros((m, 0))
            qv = np.linalg.qr(rng.standard_normal((n, width)))[0] if width else np.zeros((n, 0))
            shared = (qu[:, :rs] * s_shared) @ qv[:, :rs].T
            experts = []
            for t in range(spec.T):
                sl = slice(rs + t * re, rs + (t + 1) * re)
                experts.append((qu[:, sl] * s_expert) @ qv[:, sl].T)
        else:
            shared = (_unit_columns(rng, m, rs) * s_shared) @ _unit_columns(rng, n, rs).T
            experts = [(_unit_columns(rng, m, re) * s_expert) @ _unit_columns(rng, n, re).T
                       for _ in range(spec.T)]
        for t in range(spec.T):
            tau = scales[l] * (spec.similarity * shared + (1.0 - spec.similarity) * experts[t])
            if spec.noise_sigma > 0:
                tau = tau + spec.noise_sigma * rng.standard_normal((m, n))
            per_task[t][names[l]] = LayerMatrix(names[l], tau.astype(np.float32).astype(np.float64), kinds[l])
    meta = {"model_id": f"synthetic-seed{spec.seed}", "T_hint": spec.T}
    return TaskVectorSet([(f"task{t}", per_task[t]) for t in range(spec.T)], meta)


def random_base(dims: Mapping[str, tuple[int, int]], seed: int = 0, kinds: Mapping[str, str] | None = None,
                model_id: str = "base") -> Checkpoint:
    """A float32-representable random base checkpoint for synthetic pipelines."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, (m, n) in dims.items():
        data = (0.02 * rng.standard_normal((m, n))).astype(np.float32).astype(np.float64)
        layers[name] = LayerMatrix(name, data, (kinds or {}).get(name, "other"))
    return Checkpoint(layers, {"model_id": model_id, "T_hint": None})
