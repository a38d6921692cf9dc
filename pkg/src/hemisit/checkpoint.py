"""``SITCKPT1`` parameter files.

Layout: the 8-byte magic, then per entry ``u16`` name length, UTF-8 name,
``u8`` rank, ``rank`` x ``u32`` extents, and the raw little-endian float64
payload.  Entries run to end of file.
"""
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SITCKPT1"


def save_checkpoint(path, state: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in state.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise ValueError(f"{name}: rank {arr.ndim} does not fit in u8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    out = {}
    pos = 8

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(shape, dtype=np.int64))
        payload = take(8 * count, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return out
