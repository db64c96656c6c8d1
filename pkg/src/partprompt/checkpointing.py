"""Single-file checkpoint archive.

A checkpoint is a zip archive holding:

    manifest.json          version, step, run config, tensor directory,
                           bank metadata (keys, momentum, update counts)
    blobs/<name>.f64       named tensors as little-endian 64-bit floats
    rng.json               torch RNG state and the episode sampler state

Tensors cover every model parameter and buffer plus the optimizer's
momentum buffers ("optim/<param name>"). Restoring a checkpoint and
continuing reproduces the uninterrupted trajectory bit-for-bit in 64-bit
deterministic mode.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import DataValidationError

CHECKPOINT_SCHEMA_VERSION = 1


def _tensor_to_blob(tensor: torch.Tensor) -> bytes:
    return (
        tensor.detach().to(torch.float64).contiguous().cpu().numpy().astype("<f8").tobytes()
    )


def _blob_to_tensor(blob: bytes, shape, dtype: torch.dtype) -> torch.Tensor:
    array = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    return torch.as_tensor(array).to(dtype)


def _optimizer_momentum_blobs(model: torch.nn.Module, optimizer) -> dict[str, torch.Tensor]:
    """SGD momentum buffers keyed by the owning parameter's name."""
    if optimizer is None:
        return {}
    name_of = {id(p): n for n, p in model.named_parameters()}
    blobs = {}
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param, {})
            buf = state.get("momentum_buffer")
            if buf is not None:
                blobs[f"optim/{name_of[id(param)]}"] = buf
    return blobs


def save_checkpoint(
    path: Path,
    model: torch.nn.Module,
    config,
    step: int,
    optimizer=None,
    sampler_rng: np.random.Generator | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors: dict[str, torch.Tensor] = dict(model.state_dict())
    tensors.update(_optimizer_momentum_blobs(model, optimizer))

    bank = getattr(model, "bank", None)
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "step": step,
        "config": config.to_json_dict(),
        "tensors": [
            {"name": name, "shape": list(t.shape)} for name, t in sorted(tensors.items())
        ],
        "bank": None
        if bank is None
        else {
            "keys": bank.keys(),
            "momentum": bank.momentum,
            "update_counts": dict(sorted(bank.update_counts.items())),
        },
    }
    rng_payload = {
        "torch": torch.get_rng_state().numpy().tobytes().hex(),
        "sampler": None if sampler_rng is None else sampler_rng.bit_generator.state,
    }

    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        entries = {
            "manifest.json": json.dumps(manifest, sort_keys=True, indent=2).encode(),
            "rng.json": json.dumps(rng_payload, sort_keys=True).encode(),
        }
        for name in sorted(tensors):
            entries[f"blobs/{name}.f64"] = _tensor_to_blob(tensors[name])
        for name, payload in entries.items():
            # Fixed entry timestamp: identical runs produce identical archives.
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            archive.writestr(info, payload)
    path.write_bytes(buffer.getvalue())
    return path


def read_manifest(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as archive:
            return json.loads(archive.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise DataValidationError(f"{path} is not a checkpoint archive: {exc}")


def load_checkpoint(path: Path, model: torch.nn.Module, optimizer=None):
    """Restore tensors into ``model`` (and optimizer); returns (manifest, rng payload).

    The model must already have the right structure; for models with a
    shared-token bank, create the bank keys from the manifest first (see
    ``partprompt.training.load_model_from_checkpoint``).
    """
    path = Path(path)
    manifest = read_manifest(path)
    dtype = next(model.parameters()).dtype
    with zipfile.ZipFile(path) as archive:
        blobs = {
            entry["name"]: _blob_to_tensor(
                archive.read(f"blobs/{entry['name']}.f64"), entry["shape"], dtype
            )
            for entry in manifest["tensors"]
        }
        rng_payload = json.loads(archive.read("rng.json"))

    model_state = {k: v for k, v in blobs.items() if not k.startswith("optim/")}
    missing = set(model.state_dict()) - set(model_state)
    if missing:
        raise DataValidationError(f"checkpoint {path} lacks tensors: {sorted(missing)}")
    model.load_state_dict(model_state)

    bank = getattr(model, "bank", None)
    if bank is not None and manifest["bank"] is not None:
        bank.update_counts = dict(manifest["bank"]["update_counts"])

    if optimizer is not None:
        name_to_param = dict(model.named_parameters())
        for key, blob in blobs.items():
            if key.startswith("optim/"):
                param = name_to_param[key[len("optim/"):]]
                optimizer.state[param]["momentum_buffer"] = blob.clone()
    return manifest, rng_payload


def restore_rng(rng_payload: dict) -> np.random.Generator | None:
    """Re-seed torch's global RNG and rebuild the episode sampler."""
    torch.set_rng_state(
        torch.from_numpy(
            np.frombuffer(bytes.fromhex(rng_payload["torch"]), dtype=np.uint8).copy()
        )
    )
    state = rng_payload.get("sampler")
    if state is None:
        return None
    sampler = np.random.Generator(np.random.PCG64())
    sampler.bit_generator.state = state
    return sampler
