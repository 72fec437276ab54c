"""Sized binary container for checkpoints and weight sidecars.

Layout (all little-endian): magic ``GSCK``, u32 version, u32 entry count,
then per entry: u16 name length, name bytes, u8 dtype code, and either
(u8 ndim, u32 dims..., u64 nbytes, raw data) for arrays or (u64 nbytes,
raw bytes) for opaque byte entries. Metadata travels as a JSON byte entry
named ``__meta__``. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

__all__ = ["write_container", "read_container", "container_bytes", "parse_container"]

MAGIC = b"GSCK"
VERSION = 1
_DTYPE_BY_CODE = {0: "<f4", 1: "<f8", 2: "<i8"}
_CODE_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_BYTES_CODE = 255


def container_bytes(arrays: dict, meta: dict | None = None) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    entries = list(arrays.items())
    if meta is not None:
        entries.append(("__meta__", json.dumps(meta, sort_keys=True).encode("utf-8")))
    out += struct.pack("<I", len(entries))
    for name, value in entries:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        if isinstance(value, (bytes, bytearray)):
            out += struct.pack("<B", _BYTES_CODE)
            out += struct.pack("<Q", len(value))
            out += bytes(value)
        else:
            arr = np.ascontiguousarray(value)
            if arr.dtype not in _CODE_BY_DTYPE:
                arr = arr.astype(np.float64)
            code = _CODE_BY_DTYPE[arr.dtype]
            raw = arr.astype(_DTYPE_BY_CODE[code]).tobytes()
            out += struct.pack("<B", code)
            out += struct.pack("<B", arr.ndim)
            for d in arr.shape:
                out += struct.pack("<I", d)
            out += struct.pack("<Q", len(raw))
            out += raw
    return bytes(out)


def write_container(path, arrays: dict, meta: dict | None = None) -> None:
    data = container_bytes(arrays, meta)
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_container(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict]:
    def need(offset, count, what):
        if offset + count > len(buf):
            raise FormatError(f"{source}: truncated container, needed {count} bytes "
                              f"for {what} at offset {offset}")
        return offset + count

    if len(buf) < 12:
        raise FormatError(f"{source}: container too small ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != VERSION:
        raise FormatError(f"{source}: unsupported container version {version}")
    count = struct.unpack_from("<I", buf, 8)[0]
    off = 12
    arrays: dict = {}
    meta: dict = {}
    for _ in range(count):
        end = need(off, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off = end
        end = need(off, nlen, "name")
        name = buf[off:end].decode("utf-8")
        off = end
        end = need(off, 1, "dtype code")
        code = buf[off]
        off = end
        if code == _BYTES_CODE:
            end = need(off, 8, "byte length")
            (nbytes,) = struct.unpack_from("<Q", buf, off)
            off = end
            end = need(off, nbytes, f"bytes of {name!r}")
            raw = buf[off:end]
            off = end
            if name == "__meta__":
                try:
                    meta = json.loads(raw.decode("utf-8"))
                except ValueError as exc:
                    raise FormatError(f"{source}: invalid metadata JSON: {exc}") from exc
            else:
                arrays[name] = bytes(raw)
            continue
        if code not in _DTYPE_BY_CODE:
            raise FormatError(f"{source}: unknown dtype code {code} for entry {name!r}")
        end = need(off, 1, "ndim")
        ndim = buf[off]
        off = end
        end = need(off, 4 * ndim, "dims")
        shape = struct.unpack_from(f"<{ndim}I", buf, off) if ndim else ()
        off = end
        end = need(off, 8, "array length")
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off = end
        end = need(off, nbytes, f"data of {name!r}")
        arr = np.frombuffer(buf[off:end], dtype=_DTYPE_BY_CODE[code]).reshape(shape)
        arrays[name] = arr.copy()
        off = end
    if off != len(buf):
        raise FormatError(f"{source}: {len(buf) - off} trailing bytes after last entry")
    return arrays, meta


def read_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_container(buf, source=str(path))
