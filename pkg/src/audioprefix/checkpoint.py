"""Named-tensor checkpoint container shared by every module.

A checkpoint is an NPZ archive mapping tensor names (``encoder/...``,
``mapper_t/...``, ``decoder/...``, ``optim/...``) to row-major arrays,
plus a JSON metadata block under a reserved key.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointMismatch

METADATA_KEY = "__metadata__"


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    # reshape guards 0-d values: ascontiguousarray promotes them to 1-d
    payload = {k: np.ascontiguousarray(v).reshape(np.shape(v))
               for k, v in tensors.items()}
    if METADATA_KEY in payload:
        raise ValueError(f"{METADATA_KEY} is reserved")
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    payload[METADATA_KEY] = np.frombuffer(meta_bytes, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointMismatch(str(path), "file not found")
    with np.load(path) as archive:
        tensors = {k: archive[k] for k in archive.files if k != METADATA_KEY}
        metadata = {}
        if METADATA_KEY in archive.files:
            metadata = json.loads(bytes(archive[METADATA_KEY]).decode("utf-8"))
    return tensors, metadata


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module's state dict under ``prefix/``."""
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def load_module(module: torch.nn.Module, tensors: dict[str, np.ndarray],
                prefix: str, strict: bool = True) -> dict:
    """Load ``prefix/``-scoped tensors into a module.

    Returns a report with ``loaded`` and ``skipped`` name lists. In strict
    mode any missing or shape-mismatched tensor raises CheckpointMismatch.
    """
    state = module.state_dict()
    loaded, skipped = [], []
    new_state = {}
    for name, tensor in state.items():
        key = f"{prefix}/{name}"
        if key not in tensors:
            if strict:
                raise CheckpointMismatch(key, "missing from checkpoint")
            skipped.append(name)
            new_state[name] = tensor
            continue
        arr = tensors[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointMismatch(key, f"shape {arr.shape} != expected {tuple(tensor.shape)}")
        new_state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(tensor.dtype)
        loaded.append(name)
    module.load_state_dict(new_state)
    return {"loaded": loaded, "skipped": skipped}
