"""Self-describing checkpoint container.

Layout::

    b"SRLCKPT1"                      8-byte magic
    <uint64 little-endian>           header length in bytes
    <header>                         UTF-8 JSON, keys sorted
    <payload>                        float64 little-endian, tensors back to back

The header records the format version, a model kind tag, the feature-schema
fingerprint, each tensor's name and shape (in payload order), and free-form
metadata (seed, config hash, module config).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SRLCKPT1"
FORMAT_VERSION = 1


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict[str, np.ndarray], kind: str, schema_fingerprint: str = "",
                    metadata: dict | None = None) -> None:
    entries = []
    chunks = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "schema_fingerprint": schema_fingerprint,
        "tensors": entries,
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header and tensors, after validating the container."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: corrupt header")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} is not "
                              f"supported (expected {FORMAT_VERSION})")
    payload = blob[16 + n :]
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"]]
    if sum(sizes) * 8 != len(payload):
        raise CheckpointError(f"{path}: corrupt payload ({len(payload)} bytes, header declares "
                              f"{sum(sizes) * 8})")
    tensors = {}
    off = 0
    for e, size in zip(header["tensors"], sizes):
        tensors[e["name"]] = np.frombuffer(payload, dtype="<f8", count=size, offset=off).reshape(e["shape"]).copy()
        off += size * 8
    return header, tensors


def load_checkpoint(path, kind: str | None = None, schema_fingerprint: str | None = None):
    header, tensors = read_checkpoint(path)
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: kind mismatch: file holds {header['kind']!r}, expected {kind!r}")
    if schema_fingerprint is not None and header["schema_fingerprint"] != schema_fingerprint:
        raise CheckpointError(f"{path}: schema mismatch: checkpoint was trained on different features")
    return header, tensors


def save_module(path, module, kind: str, schema_fingerprint: str = "", metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta.setdefault("module_config", getattr(module, "config", {}))
    save_checkpoint(path, module.state_dict(), kind, schema_fingerprint, meta)


def load_module_state(path, module, kind: str, schema_fingerprint: str | None = None) -> dict:
    header, tensors = load_checkpoint(path, kind, schema_fingerprint)
    try:
        module.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not fit the model: {exc}") from None
    return header
