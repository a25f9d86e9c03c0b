"""Checkpoint files: ``checkpoint.json`` manifest + ``params.bin`` raw little-endian float32.

Manifest entries list each tensor's path, shape, dtype and byte offset; BatchNorm
running statistics are stored alongside parameters under a ``buffers`` key.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import HybridNet, ModelConfig

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _entries(arrays: dict[str, np.ndarray], offset: int) -> tuple[list[dict], list[bytes], int]:
    entries, chunks = [], []
    for path, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"path": path, "shape": list(arr.shape), "dtype": "f32le",
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    return entries, chunks, offset


def save_checkpoint(model: HybridNet, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = {k: p.value for k, p in model.named_parameters()}
    p_entries, p_chunks, off = _entries(params, 0)
    b_entries, b_chunks, _ = _entries(model.buffers(), off)
    blob = b"".join(p_chunks + b_chunks)
    (path / "params.bin").write_bytes(blob)
    manifest = {
        "version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "seed": model.seed,
        "params": p_entries,
        "buffers": b_entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
    }
    (path / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "checkpoint.json" if path.is_dir() else path
    if not mpath.exists():
        raise CheckpointError(f"checkpoint manifest not found: {mpath}")
    try:
        return json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint manifest is not valid JSON: {e}") from e


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[HybridNet, dict]:
    """Rebuild the model from a checkpoint directory; returns (model, manifest).

    With ``cfg`` given, the stored tensors must match the parameters that
    config builds; any mismatch is reported by path.
    """
    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest = read_manifest(path)
    stored_cfg = ModelConfig.from_dict(manifest["model_config"])
    model = HybridNet(cfg or stored_cfg, seed=manifest.get("seed", 0))
    blob_path = root / "params.bin"
    if not blob_path.exists():
        raise CheckpointError(f"parameter blob missing: {blob_path}")
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError("params.bin checksum does not match the manifest")

    params = dict(model.named_parameters())
    buffers = {}
    for m_path, mod in _buffer_owners(model):
        buffers[m_path] = mod
    stored = {e["path"]: e for e in manifest["params"]}
    problems = []
    for k, p in params.items():
        e = stored.get(k)
        if e is None:
            problems.append(f"{k}: missing from checkpoint")
        elif tuple(e["shape"]) != p.shape:
            problems.append(f"{k}: checkpoint shape {tuple(e['shape'])} != model shape {p.shape}")
    for k in stored:
        if k not in params:
            problems.append(f"{k}: not a parameter of this model")
    if problems:
        raise CheckpointError("checkpoint does not match model config:\n  " + "\n  ".join(problems))

    def read(e):
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"])
        return arr.reshape(e["shape"]).astype(np.float32)

    for k, p in params.items():
        p.value = read(stored[k])
        p.grad = None
    for e in manifest.get("buffers", []):
        owner_path, _, name = e["path"].rpartition(".")
        mod = buffers.get(owner_path)
        if mod is None or name not in mod._buffers:
            raise CheckpointError(f"{e['path']}: buffer not present in model")
        mod._buffers[name] = read(e)
    return model, manifest


def _buffer_owners(model: HybridNet):
    def walk(mod, prefix):
        if mod._buffers:
            yield prefix.rstrip("."), mod
        for name, child in mod._children():
            if hasattr(child, "_buffers"):
                yield from walk(child, f"{prefix}{name}.")
    yield from walk(model, "")
