"""Single-file checkpoints.

Layout::

    b"PLCK"                      magic
    uint32 LE                    format version
    uint64 LE                    manifest length in bytes
    manifest                     UTF-8 JSON, sorted keys, compact separators
    tensor blobs                 row-major little-endian float64, in manifest order

The manifest's ``tensors`` list gives each tensor's ``name``, ``shape`` and
byte ``offset`` from the start of the blob section.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PLCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    manifest: dict  # everything except tensor data and the tensor directory
    tensors: dict[str, np.ndarray] = field(default_factory=dict)  # insertion order is blob order

    def to_bytes(self) -> bytes:
        directory = []
        offset = 0
        blobs = []
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            if arr.ndim != 2:
                raise CheckpointError(f"tensor {name!r} must be 2-D, got shape {arr.shape}")
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blob = arr.tobytes()
            blobs.append(blob)
            offset += len(blob)
        manifest = dict(self.manifest)
        manifest["format_version"] = FORMAT_VERSION
        manifest["tensors"] = directory
        text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _HEADER.pack(MAGIC, FORMAT_VERSION, len(text)) + text + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _HEADER.size:
            raise CheckpointError("file too short for a checkpoint header")
        magic, version, mlen = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
        start = _HEADER.size
        if start + mlen > len(data):
            raise CheckpointError("manifest extends past end of file")
        try:
            manifest = json.loads(data[start:start + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest: {exc}") from None
        if manifest.get("format_version") != version:
            raise CheckpointError("manifest version disagrees with header")
        blob = memoryview(data)[start + mlen:]
        entries = manifest.pop("tensors", [])
        if not isinstance(entries, list):
            raise CheckpointError("manifest 'tensors' must be a list")
        tensors = {}
        expected = 0
        for i, entry in enumerate(entries):
            name = entry.get("name", "?")
            shape = entry.get("shape")
            off = entry.get("offset")
            if not (isinstance(shape, list) and len(shape) == 2 and all(isinstance(s, int) and s >= 0 for s in shape)):
                raise CheckpointError(f"tensor {name!r}: malformed shape {shape!r}")
            if off != expected:
                raise CheckpointError(f"tensor {name!r}: offset {off} but expected {expected}")
            # each tensor owns the bytes up to the next offset (or the end of the blob)
            end = entries[i + 1].get("offset") if i + 1 < len(entries) else len(blob)
            stored = end - off if isinstance(end, int) else -1
            nbytes = shape[0] * shape[1] * 8
            if stored != nbytes or off + nbytes > len(blob):
                raise CheckpointError(
                    f"tensor {name!r}: shape {shape} needs {nbytes} bytes but {max(stored, 0)} are stored"
                )
            tensors[name] = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
            expected = off + nbytes
        if expected != len(blob):
            raise CheckpointError(f"{len(blob) - expected} trailing bytes after last tensor")
        del manifest["format_version"]
        return cls(manifest=manifest, tensors=tensors)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(self.to_bytes())
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
        return cls.from_bytes(data)
