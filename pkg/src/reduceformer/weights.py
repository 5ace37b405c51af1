"""Binary weight files: magic "RFKW", versioned, CRC-32 guarded.

Layout (all integers little-endian):

    magic   4 bytes  b"RFKW"
    version u16      currently 1
    header  u32 line count, then per line: u32 byte length + UTF-8 bytes
            (the model config as key=value lines)
    tensors u32 record count, then per record:
            u32 name length + UTF-8 name
            u8  dtype code (0 = float32, 1 = float64)
            4 x u32 shape (B, C, H, W)
            raw little-endian payload, C order
    crc     u32 CRC-32 (zlib) of every preceding byte

Loading validates magic, version, structure and checksum before any model
object is built, so a bad file never yields a partial model.  Each failure
mode raises its own exception type.
"""

from __future__ import annotations

import struct
import zlib
from typing import BinaryIO

import numpy as np

from .model import Model, build_variant, config_from_lines, config_to_lines
from .tensor import Rng

MAGIC = b"RFKW"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class WeightsError(Exception):
    """Base class for weight-file problems."""


class BadMagicError(WeightsError):
    pass


class VersionMismatchError(WeightsError):
    pass


class TruncatedFileError(WeightsError):
    pass


class ChecksumError(WeightsError):
    pass


def save_weights(m: Model, path) -> None:
    """Write the model's config and parameter table; round-trips bit-exactly."""
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    lines = config_to_lines(m.config)
    chunks.append(struct.pack("<I", len(lines)))
    for line in lines:
        raw = line.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
    chunks.append(struct.pack("<I", len(m.parameters)))
    for name, arr in m.parameters.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        chunks.append(struct.pack("<B", code))
        if arr.ndim != 4:
            raise WeightsError(f"parameter {name!r} is not rank 4")
        chunks.append(struct.pack("<IIII", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(
            _CODE_DTYPES[code], copy=False).tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Cursor:
    """Bounds-checked reader over the file body."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, file body ends at {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_weights(path) -> Model:
    """Read a weight file back into a Model.

    Raises BadMagicError / VersionMismatchError / TruncatedFileError /
    ChecksumError for the respective defects; on success the restored model
    is bit-identical to the one saved.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a weight file (magic {data[:len(MAGIC)]!r})")

    cur = _Cursor(data)
    cur.take(len(MAGIC))
    version = cur.u16()
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, expected {VERSION}")

    lines = [cur.string() for _ in range(cur.u32())]
    records = []
    for _ in range(cur.u32()):
        name = cur.string()
        code = cur.u8()
        if code not in _CODE_DTYPES:
            raise TruncatedFileError(f"unknown dtype code {code} for {name!r}")
        shape = tuple(cur.u32() for _ in range(4))
        n = int(np.prod(shape))
        payload = cur.take(n * _CODE_DTYPES[code].itemsize)
        records.append((name, code, shape, payload))
    if cur.pos + 4 != len(data):
        raise TruncatedFileError(
            f"{len(data) - cur.pos - 4:+d} bytes beyond the expected checksum")
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x}")

    cfg = config_from_lines(lines)
    # skeleton model supplies the expected parameter table to check against
    skeleton = build_variant(cfg, Rng(0))
    params = {}
    for name, code, shape, payload in records:
        arr = np.frombuffer(payload, dtype=_CODE_DTYPES[code]).reshape(shape)
        params[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    expected = set(skeleton.parameters)
    got = set(params)
    if expected != got:
        missing, extra = sorted(expected - got), sorted(got - expected)
        raise WeightsError(f"parameter table mismatch: missing={missing} extra={extra}")
    for name in expected:
        if params[name].shape != skeleton.parameters[name].shape:
            raise WeightsError(
                f"parameter {name!r} has shape {params[name].shape}, "
                f"expected {skeleton.parameters[name].shape}")
    dtypes = {a.dtype for a in params.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.dtype(np.float32)
    return Model(cfg, params, skeleton.topology, skeleton.stage_of, np.dtype(dtype))
