"""Pure-Python codec kernels.

Same API as the compiled `appshare._wirecore` extension; used as the
fallback when the extension is absent or APPSHARE_PURE is set. Keep the
two implementations byte-for-byte interchangeable.
"""

from __future__ import annotations

import struct

from appshare.errors import NeedMoreBytes, OversizeFrameError

HEADER_SIZE = 6
MAX_BODY = (1 << 24) - 1

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_HEADER = struct.Struct(">IBB")


def pack_frame(channel_id: int, opcode: int, body: bytes) -> bytes:
    if len(body) > MAX_BODY:
        raise OversizeFrameError(f"body length {len(body)} >= 2**24")
    return _HEADER.pack(len(body), channel_id, opcode) + body


def scan_frame(buf, start: int, end: int):
    """Locate one complete frame in buf[start:end].

    Returns (channel_id, opcode, body_start, body_end), or None when the
    window holds only a partial frame. Raises OversizeFrameError on a
    declared body length >= 2**24 (stream is unusable afterwards).
    """
    avail = end - start
    if avail < HEADER_SIZE:
        return None
    length, channel_id, opcode = _HEADER.unpack_from(buf, start)
    if length > MAX_BODY:
        raise OversizeFrameError(f"declared body length {length} >= 2**24")
    if avail < HEADER_SIZE + length:
        return None
    body_start = start + HEADER_SIZE
    return channel_id, opcode, body_start, body_start + length


def unpack_frame(data, offset: int = 0):
    """Decode one frame at offset. Returns (channel, opcode, body, consumed).

    Raises NeedMoreBytes on a partial frame.
    """
    hit = scan_frame(data, offset, len(data))
    if hit is None:
        raise NeedMoreBytes(f"have {len(data) - offset} bytes, need a full frame")
    channel_id, opcode, body_start, body_end = hit
    return channel_id, opcode, bytes(data[body_start:body_end]), body_end - offset


def fnv1a64(data: bytes, h: int = FNV64_OFFSET) -> int:
    """64-bit FNV-1a fold of data onto accumulator h."""
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h
