"""Checkpoint archive: a zip holding `config.json`, a tensor index, and one
contiguous blob of little-endian 32-bit floats.

The format is self-describing and forward-compatible via schema_version;
integer state (optimizer steps, RNG words) rides in the index under an
`extra` mapping rather than in the tensor blob.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(
    path: str | Path,
    config: dict,
    tensors: dict[str, torch.Tensor | np.ndarray],
    extra: dict | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blob = io.BytesIO()
    offset = 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name]).astype("<f4")
        data = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "numel": int(arr.size)})
        blob.write(data)
        offset += len(data)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "tensors": index,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(config, indent=2, sort_keys=True))
        zf.writestr("index.json", json.dumps(payload, sort_keys=True))
        zf.writestr("tensors.bin", blob.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns (config, name -> float32 array, extra)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        config = json.loads(zf.read("config.json"))
        payload = json.loads(zf.read("index.json"))
        blob = zf.read("tensors.bin")
    if payload["schema_version"] > CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint schema {payload['schema_version']} is newer than supported")
    tensors: dict[str, np.ndarray] = {}
    for entry in payload["tensors"]:
        start = entry["offset"]
        end = start + entry["numel"] * 4
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return config, tensors, payload.get("extra", {})


def model_state_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {name: param for name, param in model.state_dict().items()}


def load_model_state(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    expected_keys = set(model.state_dict().keys())
    # positional tables registered as non-persistent buffers are rebuilt from config
    missing = expected_keys - state.keys()
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    model.load_state_dict({k: v.to(dtype=model.state_dict()[k].dtype) for k, v in state.items()}, strict=False)
