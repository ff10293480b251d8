"""The AFTC checkpoint container.

Layout (little-endian)::

    b"AFTC" | version u32 | count u32 |
    count x ( name_len u16 | name utf-8 | rank u8 | extents u32*rank | f32 payload )

Values are stored as float32 row-major; 64-bit tensors are narrowed on write.
"""
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"AFTC"
VERSION = 1


def encode_entries(entries):
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_entries(buf):
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("not an AFTC checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported AFTC version {version}")
    pos = 12
    entries = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError("truncated parameter name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise FormatError(f"payload for {name!r} truncated")
            entries[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry")
    return entries


def write_entries(path, entries):
    with open(path, "wb") as fh:
        fh.write(encode_entries(entries))


def read_entries(path):
    with open(path, "rb") as fh:
        return decode_entries(fh.read())
