"""Model checkpoints: a JSON manifest next to a raw little-endian f64 blob.

``manifest.json`` records the architecture, the scaler, free-form metadata,
training history, and the exact layout (name, shape, offset in elements) of
every parameter in ``weights.bin``. Weights are stored in the canonical
``RnnModel.params()`` order so a round trip is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..data import Scaler
from ..errors import CheckpointError
from .model import LayerParams, RnnArch, RnnModel

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
FORMAT_VERSION = 1


def save_checkpoint(model: RnnModel, directory: str | Path,
                    history: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layout = []
    offset = 0
    chunks = []
    for name, arr in model.params().items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        layout.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.reshape(-1))
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch.to_dict(),
        "scaler": None if model.scaler is None else model.scaler.to_dict(),
        "meta": model.meta,
        "history": history if history is not None else {},
        "n_values": int(blob.size),
        "layout": layout,
    }
    (directory / WEIGHTS_NAME).write_bytes(blob.tobytes())
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[RnnModel, dict]:
    """Rebuild a model from ``save_checkpoint`` output; returns (model, history)."""
    directory = Path(directory)
    man_path = directory / MANIFEST_NAME
    bin_path = directory / WEIGHTS_NAME
    if not man_path.is_file() or not bin_path.is_file():
        raise CheckpointError(f"no checkpoint at {directory}")
    try:
        with open(man_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}")
    blob = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    if blob.size != manifest["n_values"]:
        raise CheckpointError(
            f"weights.bin holds {blob.size} values, manifest says "
            f"{manifest['n_values']}")

    arch = RnnArch.from_dict(manifest["arch"])
    scaler = None if manifest["scaler"] is None else Scaler.from_dict(manifest["scaler"])
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["layout"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arrays[entry["name"]] = blob[start:start + n].reshape(shape).astype(float)

    layers = []
    for i in range(arch.num_layers):
        try:
            layers.append(LayerParams(
                w_ih=arrays[f"layer{i}.w_ih"], w_hh=arrays[f"layer{i}.w_hh"],
                b_ih=arrays[f"layer{i}.b_ih"], b_hh=arrays[f"layer{i}.b_hh"]))
        except KeyError as exc:
            raise CheckpointError(f"missing parameter {exc} in manifest") from exc
    if "head.w" not in arrays or "head.b" not in arrays:
        raise CheckpointError("missing head parameters in manifest")
    model = RnnModel(arch=arch, layers=layers, w_out=arrays["head.w"],
                     b_out=arrays["head.b"], scaler=scaler,
                     meta=manifest.get("meta", {}))
    expected = {e["name"] for e in manifest["layout"]}
    if set(model.params()) != expected:
        raise CheckpointError("manifest layout does not match the architecture")
    return model, manifest.get("history", {})
