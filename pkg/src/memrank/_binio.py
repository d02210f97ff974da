"""Low-level helpers for the little-endian binary sidecar formats.

All container formats in this package (embedding cache, lexical cache,
scorer/editor checkpoints) share the same primitives: a 4-byte magic,
a u32 format version, and length-prefixed UTF-8 strings.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

from .errors import InputError

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise InputError(f"truncated payload while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_u8(fh: BinaryIO, what: str = "u8") -> int:
    return _U8.unpack(read_exact(fh, 1, what))[0]


def read_u16(fh: BinaryIO, what: str = "u16") -> int:
    return _U16.unpack(read_exact(fh, 2, what))[0]


def read_u32(fh: BinaryIO, what: str = "u32") -> int:
    return _U32.unpack(read_exact(fh, 4, what))[0]


def read_u64(fh: BinaryIO, what: str = "u64") -> int:
    return _U64.unpack(read_exact(fh, 8, what))[0]


def write_u8(fh: BinaryIO, v: int) -> None:
    fh.write(_U8.pack(v))


def write_u16(fh: BinaryIO, v: int) -> None:
    fh.write(_U16.pack(v))


def write_u32(fh: BinaryIO, v: int) -> None:
    fh.write(_U32.pack(v))


def write_u64(fh: BinaryIO, v: int) -> None:
    fh.write(_U64.pack(v))


def read_str(fh: BinaryIO, what: str = "string") -> str:
    n = read_u16(fh, what + " length")
    return read_exact(fh, n, what).decode("utf-8")


def write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InputError(f"string too long for u16 length prefix: {len(raw)} bytes")
    _ = write_u16(fh, len(raw))
    fh.write(raw)


def check_magic(fh: BinaryIO, magic: bytes, path: object) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise InputError(f"{path}: bad magic {got!r}, expected {magic!r}")


def check_version(fh: BinaryIO, expected: int, path: object) -> None:
    got = read_u32(fh, "format version")
    if got != expected:
        raise InputError(f"{path}: unsupported format version {got}, expected {expected}")


def write_tensor_file(path, magic: bytes, version: int, config_json: str, tensors) -> None:
    """Checkpoint container: magic, version, config JSON, named f32 tensors."""
    import numpy as np

    with open(path, "wb") as fh:
        fh.write(magic)
        write_u32(fh, version)
        write_str(fh, config_json)
        write_u32(fh, len(tensors))
        for name, arr in tensors:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            write_str(fh, name)
            write_u8(fh, arr.ndim)
            for dim in arr.shape:
                write_u32(fh, dim)
            fh.write(arr.tobytes())


def read_tensor_file(path, magic: bytes, version: int):
    """Returns (config_json, dict name -> float64 ndarray)."""
    import numpy as np

    with open(path, "rb") as fh:
        check_magic(fh, magic, path)
        check_version(fh, version, path)
        config_json = read_str(fh, "config")
        n_tensors = read_u32(fh, "tensor count")
        tensors = {}
        for _ in range(n_tensors):
            name = read_str(fh, "tensor name")
            ndim = read_u8(fh, "ndim")
            shape = tuple(read_u32(fh, "dim") for _ in range(ndim))
            n_elem = 1
            for d in shape:
                n_elem *= d
            payload = read_exact(fh, n_elem * 4, f"tensor {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return config_json, tensors
