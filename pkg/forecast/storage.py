"""File persistence: atomic writes and the checkpoint container."""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import CheckpointError, InputError

CHECKPOINT_MAGIC = b"FCKPT"
CHECKPOINT_VERSION = 1


def ensure_parent(path: str) -> None:
    """Create the directory holding `path` if needed."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_atomic(path: str, data: str | bytes) -> None:
    """Write a file atomically via a temp file in the same directory."""
    temp_path = None
    try:
        ensure_parent(path)
        target_dir = os.path.dirname(os.path.abspath(path))
        binary = isinstance(data, bytes)
        fd, temp_path = tempfile.mkstemp(dir=target_dir, text=not binary)
        if binary:
            with os.fdopen(fd, "wb") as f:
                f.write(data)  # type: ignore[arg-type]
        else:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
                f.write(data)  # type: ignore[arg-type]
        os.replace(temp_path, path)
        logging.debug(f"Wrote {path}")
    except OSError as e:
        logging.error(f"Failed to write {path}: {e}")
        if temp_path is not None and os.path.exists(temp_path):
            os.remove(temp_path)
        raise InputError(f"Cannot write {path}: {e}") from e


def write_json(path: str, data: Any) -> None:
    """Atomically write pretty JSON."""
    write_atomic(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_text(path: str) -> str:
    """Read a UTF-8 text file, mapping I/O failures to InputError."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise InputError(f"Cannot read {path}: {e}") from e


@dataclass
class Checkpoint:
    """Named float64 arrays plus a JSON-serialisable header.

    Layout on disk:
      magic b"FCKPT" | u32 version | u32 header length | header JSON (UTF-8)
      | raw little-endian float64 values of each array in header order.
    The header lists every array's name and shape under "arrays".
    """

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        """Serialise to the container format."""
        entries = [{"name": name, "shape": list(np.shape(a))} for name, a in self.arrays.items()]
        header = json.dumps({"version": CHECKPOINT_VERSION, "arrays": entries, "meta": self.meta}, sort_keys=True)
        header_bytes = header.encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
        parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays.values())
        return b"".join(parts)

    @staticmethod
    def from_bytes(blob: bytes) -> Checkpoint:
        """Parse the container format."""
        if not blob.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError("Not a checkpoint file (bad magic)")
        offset = len(CHECKPOINT_MAGIC)
        try:
            version, header_len = struct.unpack_from("<II", blob, offset)
        except struct.error as e:
            raise CheckpointError("Truncated checkpoint header") from e
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")
        offset += 8
        try:
            header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError("Corrupt checkpoint header") from e
        offset += header_len

        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(blob):
                raise CheckpointError(f"Checkpoint truncated inside array '{entry['name']}'")
            arrays[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            offset = end
        if offset != len(blob):
            raise CheckpointError("Trailing bytes after the last checkpoint array")
        return Checkpoint(arrays=arrays, meta=header.get("meta", {}))

    def save(self, path: str) -> None:
        """Atomically write to `path`."""
        write_atomic(path, self.to_bytes())

    @staticmethod
    def load(path: str) -> Checkpoint:
        """Read from `path`."""
        try:
            with open(path, "rb") as f:
                return Checkpoint.from_bytes(f.read())
        except OSError as e:
            raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays whose name starts with `prefix`, with the prefix removed."""
        return {name[len(prefix) :]: a for name, a in self.arrays.items() if name.startswith(prefix)}
