"""Binary container, dataset manifests, and report files.

Container byte layout (all integers little-endian):

    magic    8 bytes  b"AINVBIN\\0"
    version  u32      currently 1
    kind     u8       1 = model checkpoint, 2 = anchor store
    meta     u32 length + UTF-8 JSON (configuration header)
    count    u32      number of named arrays
    arrays   repeated: u16 name length + UTF-8 name,
                       u8 dtype tag (0 = float32, 1 = int64),
                       u8 ndim, ndim x u32 dims,
                       raw little-endian array values (C order)

Dataset manifests are JSON files listing per-sample payload files; payloads
are raw little-endian float32, row-major H x W, no header (the shape lives
in the manifest).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import (BACKBONE_PRESETS, ConvBackbone, ConvBackboneConfig, FeatureStats,
                    IdentityBackbone, LinearBackbone, ModelState)
from .autodiff import Tensor

__all__ = [
    "ContainerError",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "write_manifest_dataset",
    "read_manifest_dataset",
    "canonical_json",
    "file_sha256",
    "KIND_CHECKPOINT",
    "KIND_ANCHORS",
]

_MAGIC = b"AINVBIN\x00"
_VERSION = 1
KIND_CHECKPOINT = 1
KIND_ANCHORS = 2

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_TAG_OF_KIND = {"f": 0, "i": 1}


class ContainerError(RuntimeError):
    """Corrupt, truncated, or incompatible container file."""


def write_container(path, kind: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    parts = [_MAGIC, struct.pack("<IB", _VERSION, kind)]
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_blob)))
    parts.append(meta_blob)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4", copy=False)
        elif arr.dtype.kind in ("i", "u"):
            arr = arr.astype("<i8", copy=False)
        else:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array '{name}'")
        name_blob = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_blob)))
        parts.append(name_blob)
        parts.append(struct.pack("<BB", _TAG_OF_KIND[arr.dtype.kind], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ContainerError(f"truncated container: {self.path}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, expect_kind: int | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(len(_MAGIC)) != _MAGIC:
        raise ContainerError(f"not a container file: {path}")
    version, kind = reader.unpack("<IB")
    if version != _VERSION:
        raise ContainerError(f"container version {version} unsupported (expected {_VERSION})")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"container kind {kind} != expected {expect_kind}")
    (meta_len,) = reader.unpack("<I")
    meta = json.loads(reader.take(meta_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        tag, ndim = reader.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise ContainerError(f"unknown dtype tag {tag} in {path}")
        dims = reader.unpack(f"<{ndim}I")
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        data = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(dims)
        arrays[name] = data.copy()
    return meta, arrays


# ---------------------------------------------------------------------------
# model checkpoints


def save_checkpoint(path, state: ModelState) -> None:
    backbone = state.backbone
    meta = {
        "temperature": state.temperature,
        "classes": state.seen_classes(),
        "backbone_kind": backbone.kind,
        "has_feature_stats": state.feature_stats is not None,
    }
    if backbone.kind == "conv":
        cfg = backbone.config
        meta["backbone_config"] = {
            "name": cfg.name, "channels": cfg.channels, "timesteps": cfg.timesteps,
            "filters": cfg.filters, "temporal_kernel": cfg.temporal_kernel,
            "temporal_stride": cfg.temporal_stride, "pool_kernel": cfg.pool_kernel,
            "pool_stride": cfg.pool_stride, "activation": cfg.activation,
        }
    else:
        meta["backbone_config"] = {"channels": backbone.config.channels,
                                   "timesteps": backbone.config.timesteps}
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in backbone.params.items():
        arrays[f"backbone.{name}"] = tensor.data
    for c in state.seen_classes():
        arrays[f"classifier.{c}"] = state.class_weights[c].data
    if state.feature_stats is not None:
        arrays["feature_stats.mean"] = state.feature_stats.mean
        arrays["feature_stats.var"] = state.feature_stats.var
    write_container(path, KIND_CHECKPOINT, meta, arrays)


def load_checkpoint(path) -> ModelState:
    meta, arrays = read_container(path, expect_kind=KIND_CHECKPOINT)
    kind = meta["backbone_kind"]
    cfg = meta["backbone_config"]
    if kind == "conv":
        config = ConvBackboneConfig(**cfg)
        params = {name: Tensor(arrays[f"backbone.{name}"], requires_grad=True)
                  for name in ("temporal_w", "temporal_b", "spatial_w", "spatial_b")}
        backbone = ConvBackbone(config, params)
    elif kind == "identity":
        backbone = IdentityBackbone(cfg["channels"], cfg["timesteps"])
    elif kind == "linear":
        backbone = LinearBackbone(cfg["channels"], cfg["timesteps"],
                                  Tensor(arrays["backbone.weight"], requires_grad=True))
    else:
        raise ContainerError(f"unknown backbone kind '{kind}'")
    state = ModelState(backbone, temperature=meta["temperature"])
    for c in meta["classes"]:
        state.register_class(int(c), arrays[f"classifier.{c}"])
    if meta.get("has_feature_stats"):
        state.feature_stats = FeatureStats(mean=arrays["feature_stats.mean"],
                                           var=arrays["feature_stats.var"])
    return state


# ---------------------------------------------------------------------------
# dataset manifests


def write_manifest_dataset(root, dataset: Dataset, split: str,
                           sample_rate: float = 1.0,
                           synthetic: bool = False,
                           subject_ids: np.ndarray | None = None) -> Path:
    """Write per-sample raw float32 payloads plus a JSON manifest; returns the
    manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n, h, w = dataset.x.shape
    entries = []
    for i in range(n):
        rel = f"{split}_{i:05d}.f32"
        payload = np.ascontiguousarray(dataset.x[i], dtype="<f4")
        (root / rel).write_bytes(payload.tobytes())
        entries.append({
            "file": rel,
            "class_id": int(dataset.y[i]),
            "subject_id": int(subject_ids[i]) if subject_ids is not None else 0,
            "split": split,
            "synthetic": bool(synthetic),
        })
    manifest = {
        "version": 1,
        "channels": int(h),
        "timesteps": int(w),
        "sample_rate": float(sample_rate),
        "entries": entries,
    }
    path = root / f"manifest_{split}.json"
    path.write_text(canonical_json(manifest))
    return path


def read_manifest_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    h, w = int(manifest["channels"]), int(manifest["timesteps"])
    xs, ys = [], []
    for entry in manifest["entries"]:
        blob = (manifest_path.parent / entry["file"]).read_bytes()
        arr = np.frombuffer(blob, dtype="<f4")
        if arr.size != h * w:
            raise ContainerError(f"payload {entry['file']} has {arr.size} values, "
                                 f"expected {h * w}")
        xs.append(arr.reshape(h, w).copy())
        ys.append(int(entry["class_id"]))
    if not xs:
        return Dataset(np.zeros((0, h, w), dtype=np.float32), np.zeros(0, dtype=np.int64))
    return Dataset(np.stack(xs), np.asarray(ys, dtype=np.int64))


# ---------------------------------------------------------------------------
# report encoding


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def file_sha256(path) -> str:
    import hashlib
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
