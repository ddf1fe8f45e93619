"""KSTM weight container: the on-disk format for models and weight banks.

Layout (little-endian):

    magic   4s   "KSTM"
    version u32  = 1
    alpha   f32
    beta    f32
    variant u8
    count   u32  number of tensors
    per tensor:
        name_len u16, name bytes (utf-8), rank u8, dims u32[rank],
        payload  f32[prod(dims)]
    crc     u32  CRC32 of everything after the magic

The same container carries style-network weights, feature-extractor weight
banks and optimizer-state sidecars; they differ only in tensor names.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedFileError, VersionMismatchError

MAGIC = b"KSTM"
VERSION = 1

VARIANT_CODES = {"paper": 0, "legacy_v1": 1}
VARIANT_NAMES = {v: k for k, v in VARIANT_CODES.items()}


def encode(alpha: float, beta: float, variant_code: int,
           tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize named float32 tensors into a KSTM byte string."""
    parts = [struct.pack("<IffBI", VERSION, alpha, beta, variant_code, len(tensors))]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    body = b"".join(parts)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> tuple[float, float, int, dict[str, np.ndarray]]:
    """Parse a KSTM byte string into (alpha, beta, variant_code, tensors)."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"not a KSTM file (magic {blob[:4]!r})")
    if len(blob) < 4 + 17 + 4:
        raise TruncatedFileError("KSTM header incomplete")
    body, (crc_stored,) = blob[4:-4], struct.unpack("<I", blob[-4:])

    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise TruncatedFileError("KSTM payload truncated")
        out = body[off:off + n]
        off += n
        return out

    version, alpha, beta, variant_code, count = struct.unpack("<IffBI", take(17))
    if version != VERSION:
        raise VersionMismatchError(f"KSTM version {version}, expected {VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_vals = int(np.prod(dims)) if rank else 1
        payload = take(4 * n_vals)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(body):
        raise TruncatedFileError("KSTM trailing bytes after declared tensors")
    # structural truncation raises above; a complete but corrupted file lands here
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("KSTM checksum mismatch")
    return alpha, beta, variant_code, tensors


def write_file(path, alpha: float, beta: float, variant_code: int,
               tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(alpha, beta, variant_code, tensors))


def read_file(path) -> tuple[float, float, int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
