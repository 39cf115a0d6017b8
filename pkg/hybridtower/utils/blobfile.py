"""
Versioned binary container of named float64 arrays

Layout (all integers little-endian):
    magic          4 bytes
    version        u32
    config hash    32 bytes (raw SHA-256 digest)
    meta length    u32, then UTF-8 JSON (sorted keys, compact)
    blob count     u32
    per blob:      u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims,
                   prod(dims) x f64
"""
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hybridtower.errors import DataFormatError
from hybridtower.utils.logger import get_logger

logger = get_logger("blobfile")


@dataclass
class BlobFile:
    magic: bytes
    version: int
    config_hash: str
    meta: dict = field(default_factory=dict)
    blobs: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def encode(container: BlobFile) -> bytes:
    """Serialize a BlobFile to bytes"""
    if len(container.magic) != 4:
        raise ValueError(f"Magic must be 4 bytes, got {container.magic!r}")
    digest = bytes.fromhex(container.config_hash) if container.config_hash else bytes(32)
    if len(digest) != 32:
        raise ValueError("Config hash must be a SHA-256 hex digest")
    meta = json.dumps(container.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    parts = [container.magic, struct.pack("<I", container.version), digest,
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(container.blobs))]
    for name, array in container.blobs.items():
        encoded_name = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype="<f8")
        parts.append(struct.pack("<I", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


class _Reader:

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise DataFormatError("Truncated file")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes, magic: bytes, version: int) -> BlobFile:
    """
    Parse bytes produced by ``encode``

    Args:
        data: File contents
        magic: Expected 4-byte magic
        version: Expected version

    Returns:
        BlobFile

    Raises:
        DataFormatError: on wrong magic, version or a corrupt payload
    """
    reader = _Reader(data)
    found = reader.take(4)
    if found != magic:
        raise DataFormatError(f"Bad magic {found!r}, expected {magic!r}")
    (found_version,) = reader.unpack("<I")
    if found_version != version:
        raise DataFormatError(f"Unsupported version {found_version}, expected {version}")
    config_hash = reader.take(32).hex()
    (meta_len,) = reader.unpack("<I")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"Corrupt metadata: {e}")

    (count,) = reader.unpack("<I")
    blobs = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        payload = reader.take(8 * size)
        if size == 0:
            blobs[name] = np.zeros(shape)
        else:
            blobs[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if reader.offset != len(data):
        raise DataFormatError(f"{len(data) - reader.offset} trailing bytes after last blob")
    return BlobFile(magic=magic, version=found_version, config_hash=config_hash, meta=meta, blobs=blobs)


def write(path: Path, container: BlobFile):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(container))
        logger.info(f"Wrote {container.magic.decode()} file {path} ({len(container.blobs)} blobs)")
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise


def read(path: Path, magic: bytes, version: int) -> BlobFile:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"File not found: {path}")
    return decode(path.read_bytes(), magic, version)
