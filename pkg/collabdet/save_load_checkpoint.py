"""
Save and restore model parameters.

Layout (all integers little-endian):

    b"CDCKPT"                 6-byte magic
    uint32                    format version (CHECKPOINT_VERSION)
    uint32                    header length in bytes
    header                    UTF-8 JSON: {"mode", "epoch", "meta", "entries": [{"name", "shape"}, ...]}
    payload                   for each entry, in header order: prod(shape) float64 values, row-major

The mode tag is one of weak_only, collaborative or cascade. meta holds the
network architecture needed to rebuild the model before loading values.
"""

import json
import logging
import os
import struct

import numpy as np

from collabdet.errors import ConfigurationError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CDCKPT"
CHECKPOINT_VERSION = 1


class Checkpoint:
    """In-memory view of a checkpoint file."""

    def __init__(self, values, mode, epoch, meta=None):
        self.values = values  # OrderedDict name -> np.ndarray
        self.mode = mode
        self.epoch = epoch
        self.meta = meta or {}

    def __repr__(self):
        return f"Checkpoint(mode={self.mode}, epoch={self.epoch}, entries={len(self.values)})"


def checkpoint_bytes(registry, mode, epoch, meta=None):
    header = {
        "mode": mode,
        "epoch": int(epoch),
        "meta": meta or {},
        "entries": [{"name": name, "shape": list(t.values.shape)} for name, t in registry],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
    for _, tensor in registry:
        chunks.append(np.ascontiguousarray(tensor.values, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, registry, mode, epoch, meta=None):
    """Write the registry to path. Returns the path."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(registry, mode, epoch, meta))
    logger.info(f"Saved {mode} checkpoint (epoch {epoch}) to {path}")
    return path


def parse_checkpoint(data):
    prefix = len(CHECKPOINT_MAGIC)
    if data[:prefix] != CHECKPOINT_MAGIC:
        raise ConfigurationError("Not a collabdet checkpoint (bad magic)")
    if len(data) < prefix + 8:
        raise ConfigurationError("Truncated checkpoint header")
    version, header_length = struct.unpack("<II", data[prefix:prefix + 8])
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"Unsupported checkpoint version {version}")
    offset = prefix + 8
    try:
        header = json.loads(data[offset:offset + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"Corrupt checkpoint header: {exc}") from exc
    offset += header_length
    values = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ConfigurationError(f"Truncated checkpoint payload at {entry['name']!r}")
        values[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise ConfigurationError("Trailing bytes after checkpoint payload")
    return Checkpoint(values, header["mode"], header["epoch"], header.get("meta", {}))


def load_checkpoint(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
