# cython: boundscheck=False, wraparound=False
"""Compiled codec kernels: frame header pack/scan and the FNV-1a fold.

Mirrors appshare.wire.pure byte for byte; selected at import by
appshare.wire when built.
"""

from cpython.bytes cimport PyBytes_AS_STRING, PyBytes_FromStringAndSize
from libc.string cimport memcpy

from appshare.errors import NeedMoreBytes, OversizeFrameError

HEADER_SIZE = 6
MAX_BODY = (1 << 24) - 1

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3

cdef Py_ssize_t _HEADER_SIZE = 6
cdef Py_ssize_t _MAX_BODY_SSZ = (1 << 24) - 1
cdef unsigned long long _FNV64_PRIME_C = 0x100000001B3


def pack_frame(int channel_id, int opcode, bytes body):
    cdef Py_ssize_t n = len(body)
    if n > _MAX_BODY_SSZ:
        raise OversizeFrameError(f"body length {n} >= 2**24")
    out = PyBytes_FromStringAndSize(NULL, _HEADER_SIZE + n)
    cdef unsigned char* p = <unsigned char*>PyBytes_AS_STRING(out)
    p[0] = <unsigned char>((n >> 24) & 0xFF)
    p[1] = <unsigned char>((n >> 16) & 0xFF)
    p[2] = <unsigned char>((n >> 8) & 0xFF)
    p[3] = <unsigned char>(n & 0xFF)
    p[4] = <unsigned char>(channel_id & 0xFF)
    p[5] = <unsigned char>(opcode & 0xFF)
    if n:
        memcpy(p + 6, <const char*>body, n)
    return out


def scan_frame(const unsigned char[:] buf, Py_ssize_t start, Py_ssize_t end):
    """Locate one complete frame in buf[start:end].

    Returns (channel_id, opcode, body_start, body_end), or None when the
    window holds only a partial frame. Raises OversizeFrameError on a
    declared body length >= 2**24 (stream is unusable afterwards).
    """
    cdef Py_ssize_t avail = end - start
    if avail < _HEADER_SIZE:
        return None
    cdef Py_ssize_t length = (
        (<Py_ssize_t>buf[start] << 24)
        | (<Py_ssize_t>buf[start + 1] << 16)
        | (<Py_ssize_t>buf[start + 2] << 8)
        | <Py_ssize_t>buf[start + 3]
    )
    cdef int channel_id = buf[start + 4]
    cdef int opcode = buf[start + 5]
    if length > _MAX_BODY_SSZ:
        raise OversizeFrameError(f"declared body length {length} >= 2**24")
    if avail < _HEADER_SIZE + length:
        return None
    cdef Py_ssize_t body_start = start + _HEADER_SIZE
    return channel_id, opcode, body_start, body_start + length


def unpack_frame(data, Py_ssize_t offset=0):
    """Decode one frame at offset. Returns (channel, opcode, body, consumed).

    Raises NeedMoreBytes on a partial frame.
    """
    hit = scan_frame(data, offset, len(data))
    if hit is None:
        raise NeedMoreBytes(f"have {len(data) - offset} bytes, need a full frame")
    channel_id, opcode, body_start, body_end = hit
    return channel_id, opcode, bytes(data[body_start:body_end]), body_end - offset


def fnv1a64(const unsigned char[:] data, unsigned long long h=0xCBF29CE484222325):
    """64-bit FNV-1a fold of data onto accumulator h."""
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h = (h ^ data[i]) * _FNV64_PRIME_C
    return h
