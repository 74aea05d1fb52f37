"""Binary checkpoint format for parameter stores.

Layout, all integers little-endian::

    b"FSA1"
    u32 record count
    per record:
        u16 name length, utf-8 name
        u8 rank, u32 dims[rank]
        f32 payload, row-major

Values are stored as 32-bit floats; names and shapes round-trip exactly.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .nn import Parameters

MAGIC = b"FSA1"


class CheckpointError(ValueError):
    pass


def encode(params: Parameters) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(params))
    for name, t in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        shape = t.data.shape
        if len(shape) > 0xFF:
            raise CheckpointError(f"{name}: rank {len(shape)} too large")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return bytes(out)


def decode(buf: bytes) -> Parameters:
    def need(off: int, n: int, what: str) -> None:
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at byte offset {off}, file has {len(buf)}")

    need(0, 8, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at byte offset 0")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        need(off, 2, f"record {i} name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen, f"record {i} name")
        try:
            name = buf[off:off + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"record {i}: invalid utf-8 name at byte offset {off}") from exc
        off += nlen
        need(off, 1, f"record {i} rank")
        rank = buf[off]
        off += 1
        need(off, 4 * rank, f"record {i} dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        need(off, 4 * n, f"record {i} payload")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(dims)
        off += 4 * n
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after record {count - 1} at byte offset {off}")
    return Parameters.from_arrays(arrays)


def checkpoint_save(path, params: Parameters) -> None:
    """Write atomically: a partially written file never replaces an existing one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(params))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_load(path) -> Parameters:
    return decode(Path(path).read_bytes())


def quantize(params: Parameters) -> Parameters:
    """The values a save/load round trip would produce."""
    return Parameters((k, type(v)(v.data.astype(np.float32).astype(np.float64), requires_grad=v.requires_grad))
                      for k, v in params.items())
