"""Stable content hashes for configs, model parameters and files."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

__all__ = ["config_hash", "parameter_hash", "file_sha256"]


def config_hash(cfg: dict, length: int = 12) -> str:
    """Hash of the canonical JSON form; insensitive to key order."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:length]


def parameter_hash(module_or_state) -> str:
    """SHA-256 over all parameter/buffer bytes, keys sorted.

    Bit-identical parameters hash identically, so this doubles as the
    frozen-model immutability check.
    """
    state = module_or_state
    if isinstance(module_or_state, torch.nn.Module):
        state = module_or_state.state_dict()
    h = hashlib.sha256()
    for key in sorted(state.keys()):
        h.update(key.encode("utf-8"))
        t = state[key]
        if isinstance(t, torch.Tensor):
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(t).encode("utf-8"))
    return h.hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
