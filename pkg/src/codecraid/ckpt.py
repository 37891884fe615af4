"""Single-file weight checkpoints: a binary blob whose header records the
format version, an architecture hash, and the initialization seed, so a
loaded stack is verifiably the one that was trained."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch

FORMAT_VERSION = 1


def architecture_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def param_checksum(module: torch.nn.Module) -> str:
    """Digest of every parameter and buffer; used to assert weights frozen."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, config: dict, seed: int, state_dict,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "architecture_hash": architecture_hash(config),
        "seed": int(seed),
        "config": config,
        "extra": extra or {},
        "state_dict": state_dict,
    }
    torch.save(payload, str(path))


def load_checkpoint(path, kind: str) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported checkpoint format version %r"
                         % payload.get("format_version"))
    if payload.get("kind") != kind:
        raise ValueError("checkpoint holds %r, expected %r" % (payload.get("kind"), kind))
    if architecture_hash(payload["config"]) != payload["architecture_hash"]:
        raise ValueError("architecture hash mismatch, checkpoint corrupt or stale")
    return payload
