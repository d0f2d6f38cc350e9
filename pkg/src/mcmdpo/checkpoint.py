"""Named-tensor checkpoints: a JSON manifest plus a raw little-endian float64 blob.

``<path>`` holds the manifest and ``<path>.bin`` the blob. Tensors are laid
out in the model's canonical parameter order, so equal parameters always give
identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .io_utils import atomic_write_bytes, atomic_write_text
from .model import ModelConfig, ModelParams, param_shapes

FORMAT = "mcmdpo-checkpoint-v1"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def blob_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bin")


def _group(name: str) -> str:
    return name.split(".", 1)[0]


def encode(params: ModelParams, meta: dict | None = None) -> tuple[str, bytes]:
    """Manifest text and blob bytes for ``params``; ``meta`` is stored verbatim (JSON values only)."""
    entries, chunks, offset = [], [], 0
    for name, shape in param_shapes(params.config).items():
        data = np.ascontiguousarray(params[name], dtype=_DTYPE).tobytes()
        entries.append({"name": name, "group": _group(name), "shape": list(shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "config": asdict(params.config),
        "dtype": "float64-le",
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "meta": meta or {},
    }
    return json.dumps(manifest, indent=1, sort_keys=True) + "\n", blob


def save(params: ModelParams, path, meta: dict | None = None) -> None:
    manifest, blob = encode(params, meta)
    atomic_write_bytes(blob_path(path), blob)
    atomic_write_text(path, manifest)


def decode(manifest_text: str, blob: bytes) -> ModelParams:
    try:
        manifest = json.loads(manifest_text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"format: expected {FORMAT!r}, got {manifest.get('format')!r}")
    try:
        config = ModelConfig(**manifest["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"config: {exc}") from exc
    expected_shapes = param_shapes(config)
    entries = manifest.get("tensors", [])
    names = [e.get("name") for e in entries]
    if sorted(names) != sorted(expected_shapes):
        missing = sorted(set(expected_shapes) - set(names))
        extra = sorted(set(names) - set(expected_shapes))
        raise CheckpointError(f"tensors: missing {missing}, unexpected {extra}")
    need = sum(int(np.prod(s)) for s in expected_shapes.values()) * _DTYPE.itemsize
    if manifest.get("blob_bytes") != need:
        raise CheckpointError(f"blob_bytes: manifest says {manifest.get('blob_bytes')}, shapes need {need}")
    if len(blob) != need:
        raise CheckpointError(f"blob length: expected {need} bytes, got {len(blob)}")
    arrays = {}
    for e in entries:
        name = e["name"]
        if e.get("group") != _group(name):
            raise CheckpointError(f"{name}.group: expected {_group(name)!r}, got {e.get('group')!r}")
        shape = tuple(e.get("shape", ()))
        if shape != tuple(expected_shapes[name]):
            raise CheckpointError(f"{name}.shape: expected {expected_shapes[name]}, got {shape}")
        start = int(e["offset"])
        stop = start + int(np.prod(shape)) * _DTYPE.itemsize
        if start < 0 or stop > len(blob):
            raise CheckpointError(f"{name}.offset: bytes {start}..{stop} outside blob of {len(blob)}")
        arrays[name] = np.frombuffer(blob[start:stop], dtype=_DTYPE).reshape(shape).astype(np.float64)
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CheckpointError("blob_sha256: blob does not match the manifest digest")
    return ModelParams(config, arrays)


def load(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    bpath = blob_path(path)
    if not bpath.exists():
        raise CheckpointError(f"no checkpoint blob at {bpath}")
    return decode(path.read_text(encoding="utf-8"), bpath.read_bytes())


def read_meta(path) -> dict:
    try:
        return dict(json.loads(Path(path).read_text(encoding="utf-8")).get("meta", {}))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc}") from exc


def group_digest(params: ModelParams, group: str) -> str:
    """SHA-256 of one parameter group's bytes."""
    return hashlib.sha256(params.group_bytes(group)).hexdigest()
