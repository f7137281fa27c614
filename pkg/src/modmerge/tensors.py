"""Model containers: functional components, bundles, task vectors, MFB serialization.

Every weight block is a float32 numpy array (row-major). A model is a mapping
from (layer_index, kind) component ids to one array each; a bundle holds the
pre-trained model plus T task-specific models with identical component layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

MFB_MAGIC = b"MFB1"
MFB_VERSION = 1


class BundleFormatError(Exception):
    """Raised when an MFB container is malformed or inconsistent."""


class ComponentKind(IntEnum):
    ATTENTION = 0
    MLP = 1
    NORM = 2
    EMBEDDING = 3
    HEAD = 4

    @classmethod
    def from_name(cls, name: str) -> "ComponentKind":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown component kind {name!r}") from None


@dataclass(frozen=True, order=True)
class ComponentId:
    layer_index: int
    kind: ComponentKind

    def __post_init__(self):
        if self.layer_index < 0:
            raise ValueError(f"layer_index must be non-negative, got {self.layer_index}")

    def __str__(self) -> str:
        return f"L{self.layer_index}/{self.kind.name}"


def as_weight_array(data, *, name: str = "tensor") -> np.ndarray:
    """Validate and normalize a weight block: float32, C-contiguous, finite, read-only."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.size == 0:
        raise ValueError(f"{name}: empty tensor")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite value detected")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ModelComponents:
    """One model decomposed into named functional components (immutable)."""

    components: dict[ComponentId, np.ndarray]

    def __post_init__(self):
        if not self.components:
            raise ValueError("a model must have at least one component")
        validated = {
            cid: as_weight_array(arr, name=str(cid)) for cid, arr in self.components.items()
        }
        object.__setattr__(self, "components", validated)

    def ids(self) -> list[ComponentId]:
        return sorted(self.components)

    def __getitem__(self, cid: ComponentId) -> np.ndarray:
        try:
            return self.components[cid]
        except KeyError:
            raise KeyError(f"unknown component {cid}") from None

    def __contains__(self, cid: ComponentId) -> bool:
        return cid in self.components

    def param_count(self) -> int:
        return sum(arr.size for arr in self.components.values())


def component_param_count(model: ModelComponents, cid: ComponentId) -> int:
    """Number of parameters in one component (product of its shape)."""
    return int(model[cid].size)


@dataclass(frozen=True)
class ModelBundle:
    """Pre-trained model plus T task-specific models sharing its component layout."""

    pretrained: ModelComponents
    task_models: tuple[ModelComponents, ...]
    task_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "task_models", tuple(self.task_models))
        object.__setattr__(self, "task_names", tuple(self.task_names))
        if len(self.task_models) != len(self.task_names):
            raise ValueError(
                f"{len(self.task_models)} task models but {len(self.task_names)} names"
            )
        if len(self.task_models) < 1:
            raise ValueError("a bundle needs at least one task model")
        if len(set(self.task_names)) != len(self.task_names):
            raise ValueError("task names must be unique")
        ref_ids = self.pretrained.ids()
        for name, model in zip(self.task_names, self.task_models):
            if model.ids() != ref_ids:
                raise ValueError(f"task {name!r}: component set differs from pretrained")
            for cid in ref_ids:
                if model[cid].shape != self.pretrained[cid].shape:
                    raise ValueError(
                        f"task {name!r}, component {cid}: shape "
                        f"{model[cid].shape} != pretrained {self.pretrained[cid].shape}"
                    )

    @property
    def num_tasks(self) -> int:
        return len(self.task_models)

    def component_ids(self) -> list[ComponentId]:
        return self.pretrained.ids()

    def total_params(self) -> int:
        return self.pretrained.param_count()


def task_vector(task: ModelComponents, pre: ModelComponents) -> ModelComponents:
    """Per-component difference task - pre (the fine-tuning delta)."""
    if task.ids() != pre.ids():
        raise ValueError("component sets differ between task and pretrained models")
    diffs = {}
    for cid in pre.ids():
        a, b = pre[cid], task[cid]
        if a.shape != b.shape:
            raise ValueError(f"component {cid}: shape {b.shape} != {a.shape}")
        diffs[cid] = b - a
    return ModelComponents(diffs)


# --- MFB container -----------------------------------------------------------
#
# Little-endian layout:
#   magic "MFB1", u32 version=1, u32 model_count
#   per model: u16 name length + UTF-8 name, u32 component count,
#     per component: u32 layer_index, u8 kind, u8 rank, u32 extents[rank],
#                    raw f32 payload (row-major)
# Model index 0 is always the pre-trained model.

_PRETRAINED_NAME = "pretrained"


def _write_model(out, name: str, model: ModelComponents) -> None:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise ValueError(f"model name too long: {name!r}")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<I", len(model.components)))
    for cid in model.ids():
        arr = model[cid]
        if arr.ndim > 0xFF:
            raise ValueError(f"component {cid}: rank {arr.ndim} exceeds container limit")
        out.write(struct.pack("<IBB", cid.layer_index, int(cid.kind), arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    """Write a bundle to an MFB container. Round-trips bit-exactly."""
    path = Path(path)
    with open(path, "wb") as out:
        out.write(MFB_MAGIC)
        out.write(struct.pack("<II", MFB_VERSION, bundle.num_tasks + 1))
        _write_model(out, _PRETRAINED_NAME, bundle.pretrained)
        for name, model in zip(bundle.task_names, bundle.task_models):
            _write_model(out, name, model)


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BundleFormatError(f"{self.path}: truncated file (wanted {n} more bytes)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_model(r: _Reader) -> tuple[str, ModelComponents]:
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode("utf-8")
    (n_components,) = r.unpack("<I")
    if n_components == 0:
        raise BundleFormatError(f"{r.path}: model {name!r} has no components")
    components: dict[ComponentId, np.ndarray] = {}
    for _ in range(n_components):
        layer, kind_code, rank = r.unpack("<IBB")
        try:
            kind = ComponentKind(kind_code)
        except ValueError:
            raise BundleFormatError(f"{r.path}: unknown component kind code {kind_code}") from None
        extents = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(extents, dtype=np.int64)) if extents else 1
        if count <= 0 or count > len(r.data):
            raise BundleFormatError(f"{r.path}: implausible component size {extents}")
        payload = r.take(4 * count)
        arr = np.frombuffer(payload, dtype="<f4").reshape(extents)
        cid = ComponentId(layer, kind)
        if cid in components:
            raise BundleFormatError(f"{r.path}: duplicate component {cid} in model {name!r}")
        components[cid] = arr
    try:
        return name, ModelComponents(components)
    except ValueError as exc:
        raise BundleFormatError(f"{r.path}: {exc}") from None


def load_bundle(path: str | Path) -> ModelBundle:
    """Read and fully validate an MFB container."""
    path = Path(path)
    data = path.read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MFB_MAGIC:
        raise BundleFormatError(f"{path}: bad magic, not an MFB container")
    version, model_count = r.unpack("<II")
    if version != MFB_VERSION:
        raise BundleFormatError(f"{path}: unsupported version {version}")
    if model_count < 2:
        raise BundleFormatError(f"{path}: need pretrained + at least one task model")
    models = [_read_model(r) for _ in range(model_count)]
    if r.pos != len(data):
        raise BundleFormatError(f"{path}: {len(data) - r.pos} trailing bytes after last model")
    try:
        return ModelBundle(
            pretrained=models[0][1],
            task_models=tuple(m for _, m in models[1:]),
            task_names=tuple(name for name, _ in models[1:]),
        )
    except ValueError as exc:
        raise BundleFormatError(f"{path}: {exc}") from None
