"""Binary parameter checkpoints.

Layout (little-endian): b"GSNN", u16 version, u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 rank, u32 per dim, f64 values.
"""
import struct

import numpy as np

MAGIC = b"GSNN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state):
    parts = [MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name, value in state.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


def loads(buf):
    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        return struct.unpack_from(fmt, buf, off), off + size

    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic at byte 0")
    (version, count), off = take("<HI", 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at byte 4")
    state = {}
    for _ in range(count):
        (n,), off = take("<H", off)
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,), off = take("<B", off)
        dims, off = take(f"<{rank}I", off)
        count_vals = int(np.prod(dims)) if rank else 1
        vals, _ = take(f"<{count_vals}d", off)
        state[name] = np.frombuffer(buf, "<f8", count_vals, off).reshape(dims).copy()
        off += 8 * count_vals
    return state


def save(path, state):
    with open(path, "wb") as f:
        f.write(dumps(state))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
