"""Self-describing weight manifest container.

One binary file holds named little-endian arrays plus an application
meta dict: magic, a length-prefixed JSON header listing
(name, shape, dtype, offset, nbytes) per entry and a SHA-256 checksum of
the payload, followed by the raw payload bytes.  Used for pretrained
encoder import, full checkpoints, and optimizer state.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import IoFailure, ToolkitError

MAGIC = b"CXWM1\n"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}


class ManifestMismatch(ToolkitError):
    pass


def save_manifest(path: str | Path, arrays: dict[str, np.ndarray],
                  meta: dict | None = None) -> None:
    """Write arrays and meta atomically (temp file + rename)."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        dtype_name = str(arr.dtype)
        if dtype_name not in _DTYPES:
            raise ManifestMismatch(f"unsupported dtype {dtype_name} for entry {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype_name, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": 1,
        "meta": meta or {},
        "entries": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header_bytes).to_bytes(8, "little"))
            fh.write(header_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta); verifies magic and payload checksum."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise IoFailure(f"no such manifest: {path}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise ManifestMismatch(f"{path}: not a weight manifest")
    pos = len(MAGIC)
    header_len = int.from_bytes(data[pos : pos + 8], "little")
    pos += 8
    try:
        header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestMismatch(f"{path}: corrupt manifest header") from exc
    payload = data[pos + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ManifestMismatch(f"{path}: payload checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    for ent in header["entries"]:
        raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[ent["dtype"]]).reshape(ent["shape"])
        arrays[ent["name"]] = arr.astype(ent["dtype"])  # writable native-order copy
    return arrays, header.get("meta", {})


def manifest_digest(path: str | Path) -> str:
    """Short content hash of a manifest file, for provenance sidecars."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()[:16]
