"""TAV1 volume files.

Layout (all integers little-endian)::

    b"TAV1" | version u16 | kind u8 | ndim u8 | extents u32 * ndim
    | payload (float32 for kind 0, uint8 for kind 1) | checksum 8 bytes

The checksum is a 64-bit BLAKE2b digest of everything before it.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import SegMap, Volume

MAGIC = b"TAV1"
VERSION = 1
KIND_INTENSITY = 0
KIND_LABELS = 1
MAX_ELEMENTS = 1 << 31
_HEADER = struct.Struct("<4sHBB")


class VolumeFormatError(Exception):
    """Base class for unreadable or invalid volume files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


class ExtentOverflowError(VolumeFormatError):
    pass


class ChecksumError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


def checksum64(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_array(arr: np.ndarray, kind: int) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError(f"array rank {arr.ndim} cannot be stored")
    if any(s == 0 for s in arr.shape):
        raise ValueError(f"refusing to write a volume with a zero extent {arr.shape}")
    if any(s >= 1 << 32 for s in arr.shape) or arr.size >= MAX_ELEMENTS:
        raise ExtentOverflowError(f"extents {arr.shape} exceed the format limits")
    if kind == KIND_INTENSITY:
        body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    elif kind == KIND_LABELS:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("label values must fit in u8")
        body = np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    else:
        raise ValueError(f"unknown kind {kind}")
    head = _HEADER.pack(MAGIC, VERSION, kind, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = head + body
    return payload + checksum64(payload)


def decode_array(buf: bytes) -> tuple[int, np.ndarray]:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("truncated header")
    _, version, kind, ndim = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported TAV1 version {version}")
    if kind not in (KIND_INTENSITY, KIND_LABELS):
        raise VolumeFormatError(f"unknown payload kind {kind}")
    off = _HEADER.size
    if ndim == 0:
        raise VolumeFormatError("volume has no extents")
    if len(buf) < off + 4 * ndim:
        raise TruncatedFileError("truncated extent table")
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    if any(s == 0 for s in shape):
        raise VolumeFormatError(f"zero extent in {shape}")
    count = 1
    for s in shape:
        count *= s
    if count >= MAX_ELEMENTS:
        raise ExtentOverflowError(f"extents {shape} exceed the format limits")
    itemsize = 4 if kind == KIND_INTENSITY else 1
    need = off + count * itemsize + 8
    if len(buf) < need:
        raise TruncatedFileError(f"expected {need} bytes, file has {len(buf)}")
    if len(buf) > need:
        raise VolumeFormatError(f"{len(buf) - need} trailing bytes after checksum")
    if checksum64(buf[: need - 8]) != buf[need - 8 : need]:
        raise ChecksumError("checksum mismatch")
    dtype = "<f4" if kind == KIND_INTENSITY else np.uint8
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
    return kind, arr.astype(np.float32 if kind == KIND_INTENSITY else np.uint8)


def write_array(path, arr: np.ndarray, kind: int = KIND_INTENSITY) -> None:
    atomic_write_bytes(path, encode_array(arr, kind))


def read_array(path) -> tuple[int, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_array(fh.read())


def write_volume(path, vol: Volume | SegMap) -> None:
    if isinstance(vol, SegMap):
        write_array(path, vol.labels, KIND_LABELS)
    elif isinstance(vol, Volume):
        write_array(path, vol.data, KIND_INTENSITY)
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")


def read_volume(path, modality: str = "T1W", patient_id: str = "") -> Volume | SegMap:
    """Read a TAV1 file; label payloads come back as :class:`SegMap`.

    The file stores only kind, extents and values, so modality and patient id
    are supplied by the caller (usually from the dataset manifest).
    """
    kind, arr = read_array(path)
    if kind == KIND_LABELS:
        return SegMap(arr, patient_id)
    return Volume(arr, modality, patient_id)
