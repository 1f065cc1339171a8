"""Checkpoint container shared by every network in the package.

Layout::

    b"MISRCKPT"            8-byte magic
    uint32 (LE)            header length in bytes
    header                 UTF-8 JSON: config, config_hash, tensors[{name, shape, offset}]
    payload                little-endian float32 arrays, concatenated in header order

Tensor names carry a namespace prefix (``misr.``, ``sisr.``, ``shiftnet.``,
``color_match.``) so one file can hold several cooperating networks.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .io import atomic_write_bytes

MAGIC = b"MISRCKPT"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, modules: dict, config: dict) -> str:
    """Write the state of ``{namespace: module}`` plus ``config``; returns the config hash."""
    arrays = []
    for ns, module in modules.items():
        state = module.state_dict() if hasattr(module, "state_dict") else module
        for name, t in state.items():
            arrays.append((f"{ns}.{name}", np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")))
    entries, offset = [], 0
    for name, a in arrays:
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    digest = config_hash(config)
    header = json.dumps({"config": config, "config_hash": digest, "tensors": entries}, sort_keys=True).encode()
    payload = b"".join(a.tobytes() for _, a in arrays)
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(header)) + header + payload)
    return digest


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, {name: float32 array})``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n])
    if config_hash(header["config"]) != header["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    base = 12 + n
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(e["shape"]).copy()
    return header, arrays


def load_into(module: torch.nn.Module, arrays: dict, namespace: str) -> None:
    prefix = namespace + "."
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    if not state:
        raise KeyError(f"no tensors under namespace {namespace!r}")
    module.load_state_dict(state)


def namespaces(arrays: dict) -> set:
    return {k.split(".", 1)[0] for k in arrays}
