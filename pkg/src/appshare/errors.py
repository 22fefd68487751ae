"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AppShareError(Exception):
    """Base class for all appshare errors."""


# --- wire codec ---

class WireError(AppShareError):
    """Malformed or unencodable wire data."""


class DelimiterInFieldError(WireError):
    """A datagram field contains the field delimiter or a newline."""


class EmptyFieldError(WireError):
    """A required datagram field is empty."""


class InvalidFieldError(WireError):
    """A datagram field fails validation (e.g. not a dotted-quad IPv4)."""


class UnknownTypeError(WireError):
    """Datagram type tag outside 0-3."""


class FieldCountMismatchError(WireError):
    """Wrong number of //-separated fields for the datagram type."""


class BadEncodingError(WireError):
    """Datagram bytes are not valid UTF-8."""


class UnknownOpcodeError(WireError):
    """Frame opcode byte outside the defined set."""


class OversizeFrameError(WireError):
    """Declared frame body length >= 2**24; the stream is unusable."""


class NeedMoreBytes(WireError):
    """Incomplete frame; feed more bytes and retry. Not a failure."""


# --- cluster / multicast ---

class NotClassDError(AppShareError):
    """Multicast group address is not in 224.0.0.0-239.255.255.255."""


class BindFailureError(AppShareError):
    """Could not bind the requested address/port."""


# --- application pool ---

class ManifestParseError(AppShareError):
    """Malformed manifest line."""

    def __init__(self, path: str, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class DuplicateAppError(AppShareError):
    """Manifest lists the same app_name twice."""


class UnknownAppError(AppShareError):
    """app_name not present in the pool."""


# --- broker / termhost ---

class UpstreamUnreachableError(AppShareError):
    """Could not establish the upstream terminal-host session."""


class ProtocolViolationError(AppShareError):
    """Peer broke the framing contract (e.g. first frame not Hello)."""


class HandshakeTimeoutError(AppShareError):
    """No Hello frame arrived within the negotiation window."""


class SessionRefusedError(AppShareError):
    """Host refused the session (single-login limit reached)."""


# --- client ---

class NoMasterError(AppShareError):
    """No master client is listening on the master socket."""


class MasterSocketInUseError(AppShareError):
    """Another master already owns the master socket."""


class BrokerUnreachableError(AppShareError):
    """Could not connect to the broker."""


class SlaveTimeoutError(AppShareError):
    """Master accepted the command but never answered."""


# --- harness ---

class TooFewRowsError(AppShareError):
    """Linear fit needs at least 3 rows."""


class SessionSetupFailureError(AppShareError):
    """A load-test client could not be brought up; CSV is partial."""
