"""Wire formats: cluster datagrams and length-prefixed stream frames."""

from appshare.wire.datagrams import (
    ClusterDatagram,
    Heartbeat,
    Leave,
    Query,
    Reply,
    decode_datagram,
    encode_datagram,
    is_dotted_quad,
)
from appshare.wire.frames import (
    CHANNEL_CONTROL,
    CHANNEL_GLOBAL,
    CONNECTION_BUFFER_BYTES,
    CONTROL_OPCODES,
    DEFAULT_BUFFER_CAPACITY,
    DEFAULT_OUT_BUFFER_CAPACITY,
    FIRST_SEAMLESS_CHANNEL,
    FNV64_OFFSET,
    GLOBAL_OPCODES,
    HEADER_SIZE,
    KERNEL_NAME,
    MAX_BODY,
    SEAMLESS_OPCODES,
    FrameDecoder,
    Opcode,
    StreamFrame,
    decode_frame,
    encode_frame,
    fnv1a64,
)

__all__ = [
    "ClusterDatagram",
    "Query",
    "Reply",
    "Heartbeat",
    "Leave",
    "encode_datagram",
    "decode_datagram",
    "is_dotted_quad",
    "StreamFrame",
    "Opcode",
    "FrameDecoder",
    "encode_frame",
    "decode_frame",
    "HEADER_SIZE",
    "MAX_BODY",
    "CHANNEL_GLOBAL",
    "CHANNEL_CONTROL",
    "FIRST_SEAMLESS_CHANNEL",
    "CONTROL_OPCODES",
    "SEAMLESS_OPCODES",
    "GLOBAL_OPCODES",
    "DEFAULT_BUFFER_CAPACITY",
    "DEFAULT_OUT_BUFFER_CAPACITY",
    "CONNECTION_BUFFER_BYTES",
    "FNV64_OFFSET",
    "fnv1a64",
    "KERNEL_NAME",
]
