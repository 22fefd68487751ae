"""Length-prefixed stream framing shared by broker, client and terminal host.

Wire layout (normative, big-endian):

    +-------------+------------+-----------+----------------+
    | body len N  | channel_id |  opcode   |  body (N bytes)|
    | u32         | u8         | u8        |                |
    +-------------+------------+-----------+----------------+

Body length excludes the 6-byte header; a decode consumes exactly 6+N
bytes. Bodies are capped below 2**24: a larger declared length marks a
corrupt or hostile peer and the connection must be dropped (there is no
resynchronization).

Channel discipline:
    channel 0   global channel: Input and Update frames
    channel 1   control channel: Hello, Welcome, Bye
    channel 2+  per-session seamless channels: Spawn, SpawnAck, Focus

The hot pack/scan kernels live in the compiled `appshare._wirecore`
extension when built, with `appshare.wire.pure` as the drop-in fallback.
Set APPSHARE_PURE=1 to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import IntEnum

from appshare.errors import UnknownOpcodeError


def _load_kernel():
    if not os.environ.get("APPSHARE_PURE"):
        try:
            from appshare import _wirecore

            return _wirecore
        except ImportError:
            pass
    from appshare.wire import pure

    return pure


_kernel = _load_kernel()

KERNEL_NAME = "compiled" if _kernel.__name__.endswith("_wirecore") else "pure"

HEADER_SIZE = 6
MAX_BODY = (1 << 24) - 1

CHANNEL_GLOBAL = 0
CHANNEL_CONTROL = 1
FIRST_SEAMLESS_CHANNEL = 2

# Per-connection buffer sizing. The reassembly buffer backs the decoder;
# the out buffer stages writes so a slice drain is one syscall. Their sum
# is the per-connection retained-memory proxy reported by metrics, so
# changing them shifts the load-test columns.
DEFAULT_BUFFER_CAPACITY = 16384
DEFAULT_OUT_BUFFER_CAPACITY = 49152
CONNECTION_BUFFER_BYTES = DEFAULT_BUFFER_CAPACITY + DEFAULT_OUT_BUFFER_CAPACITY

fnv1a64 = _kernel.fnv1a64
FNV64_OFFSET = 0xCBF29CE484222325


class Opcode(IntEnum):
    HELLO = 0
    WELCOME = 1
    SPAWN = 2
    SPAWN_ACK = 3
    FOCUS = 4
    INPUT = 5
    UPDATE = 6
    BYE = 7


# Channel class each opcode must ride on; checked by the broker/host, not
# by the codec (the codec round-trips any channel byte).
CONTROL_OPCODES = frozenset({Opcode.HELLO, Opcode.WELCOME, Opcode.BYE})
SEAMLESS_OPCODES = frozenset({Opcode.SPAWN, Opcode.SPAWN_ACK, Opcode.FOCUS})
GLOBAL_OPCODES = frozenset({Opcode.INPUT, Opcode.UPDATE})


@dataclass(frozen=True)
class StreamFrame:
    channel_id: int
    opcode: Opcode
    body: bytes = b""

    def text(self) -> str:
        """Body decoded as UTF-8 (control/seamless bodies are text)."""
        return self.body.decode("utf-8")


def encode_frame(frame: StreamFrame) -> bytes:
    if not 0 <= frame.channel_id <= 255:
        raise ValueError(f"channel_id {frame.channel_id} not in 0..255")
    return _kernel.pack_frame(frame.channel_id, int(Opcode(frame.opcode)), frame.body)


def decode_frame(data: bytes, offset: int = 0) -> tuple[StreamFrame, int]:
    """Decode one frame at offset; returns (frame, bytes consumed).

    Raises NeedMoreBytes on partial input and OversizeFrameError on a
    hostile length prefix.
    """
    channel_id, opcode, body, consumed = _kernel.unpack_frame(data, offset)
    return StreamFrame(channel_id, _opcode(opcode), body), consumed


def _opcode(raw: int) -> Opcode:
    try:
        return Opcode(raw)
    except ValueError:
        raise UnknownOpcodeError(f"opcode byte {raw} is not defined") from None


class FrameDecoder:
    """Incremental decoder for one connection (single-owner, not shared).

    Holds a preallocated reassembly buffer; `buffer_bytes` is the retained
    capacity and feeds the broker's memory proxies. The buffer grows only
    when a single frame outsizes it and never shrinks back.
    """

    def __init__(self, capacity: int = DEFAULT_BUFFER_CAPACITY):
        self._buf = bytearray(capacity)
        self._start = 0
        self._end = 0

    @property
    def buffer_bytes(self) -> int:
        return len(self._buf)

    @property
    def backlog(self) -> int:
        """Bytes fed but not yet decoded."""
        return self._end - self._start

    def feed(self, data: bytes) -> None:
        need = len(data)
        if need > len(self._buf) - self._end:
            self._make_room(need)
        self._buf[self._end : self._end + need] = data
        self._end += need

    def _make_room(self, need: int) -> None:
        if self._start:
            pending = self._end - self._start
            self._buf[:pending] = self._buf[self._start : self._end]
            self._start = 0
            self._end = pending
        while need > len(self._buf) - self._end:
            self._buf.extend(bytes(len(self._buf)))

    def pop(self) -> StreamFrame | None:
        """Next complete frame, or None until more bytes are fed."""
        hit = _kernel.scan_frame(self._buf, self._start, self._end)
        if hit is None:
            return None
        channel_id, opcode, body_start, body_end = hit
        body = bytes(self._buf[body_start:body_end])
        self._start = body_end
        if self._start == self._end:
            self._start = self._end = 0
        return StreamFrame(channel_id, _opcode(opcode), body)

    def drain(self) -> list[StreamFrame]:
        """All currently complete frames."""
        frames = []
        while (frame := self.pop()) is not None:
            frames.append(frame)
        return frames
