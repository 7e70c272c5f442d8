"""Checkpoint directories: a JSON manifest plus one raw float64 payload per array.

The manifest records the model configuration, the catalog digest, training
position and, for every stored array, its shape and SHA-256.  Loading
verifies all of these and refuses anything that does not match.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .catalog import DEFAULT_CATALOG, VariableCatalog
from .model import CrossFormer, ModelConfig

FORMAT = "s2sdrought-checkpoint-1"
_DTYPE = np.dtype("<f8")


class CheckpointError(Exception):
    pass


def _file_name(key: str) -> str:
    return key.replace("/", "__").replace("#", "--") + ".f64"


def _write(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_checkpoint(directory, model: CrossFormer, optimizer=None, training_state: dict | None = None, extra: dict | None = None):
    """Write ``model`` (and optionally the optimizer moments) to ``directory``."""
    d = Path(directory)
    (d / "arrays").mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    if optimizer is not None:
        for k, v in optimizer.m.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in optimizer.v.items():
            arrays[f"adam_v/{k}"] = v
    entries = []
    for key, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        payload = a.tobytes()
        name = _file_name(key)
        _write(d / "arrays" / name, payload)
        entries.append({"key": key, "file": name, "shape": list(a.shape), "sha256": hashlib.sha256(payload).hexdigest()})
    manifest = {
        "format": FORMAT,
        "model_config": model.config.to_dict(),
        "catalog_digest": model.catalog.digest(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "training": training_state or {},
        "extra": extra or {},
        "arrays": entries,
    }
    _write(d / "manifest.json", (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted checkpoint manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint manifest")
    for key in ("model_config", "catalog_digest", "arrays"):
        if key not in manifest:
            raise CheckpointError(f"checkpoint manifest lacks {key!r}")
    return manifest


def _read_arrays(d: Path, manifest: dict) -> dict:
    out = {}
    for e in manifest["arrays"]:
        try:
            payload = (d / "arrays" / e["file"]).read_bytes()
        except FileNotFoundError as exc:
            raise CheckpointError(f"missing payload for {e['key']}") from exc
        if hashlib.sha256(payload).hexdigest() != e["sha256"]:
            raise CheckpointError(f"payload checksum mismatch for {e['key']}")
        a = np.frombuffer(payload, dtype=_DTYPE)
        if a.size != int(np.prod(e["shape"])):
            raise CheckpointError(f"payload size mismatch for {e['key']}")
        out[e["key"]] = a.reshape(e["shape"]).copy()
    return out


def load_checkpoint(directory, catalog: VariableCatalog = DEFAULT_CATALOG, config: ModelConfig | None = None):
    """Rebuild the model and return ``(model, optimizer_state, manifest)``.

    ``optimizer_state`` is ``None`` when no moments were saved; otherwise a
    dict suitable for :meth:`AdamW.load_state`.
    """
    d = Path(directory)
    manifest = read_manifest(d)
    if manifest["catalog_digest"] != catalog.digest():
        raise CheckpointError("checkpoint was written for a different variable catalog")
    try:
        stored = ModelConfig.from_dict(manifest["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model configuration in manifest: {exc}") from exc
    if config is not None and config.to_dict() != stored.to_dict():
        raise CheckpointError("checkpoint model configuration differs from the requested one")
    arrays = _read_arrays(d, manifest)
    model = CrossFormer(stored, catalog)
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    expected = set(model.state_arrays())
    if set(params) != expected:
        raise CheckpointError("checkpoint parameters do not match the model layout")
    model.load_state_arrays(params)
    opt = None
    if manifest.get("optimizer") is not None:
        opt = dict(manifest["optimizer"])
        opt["m"] = {k[len("adam_m/") :]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        opt["v"] = {k[len("adam_v/") :]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return model, opt, manifest
