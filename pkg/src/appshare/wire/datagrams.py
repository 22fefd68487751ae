"""Multicast cluster datagram codec.

Datagrams are UTF-8 text of the form `<type>//<field>//...`:

    0//<app_name>                                           query
    1//<requester_ip>//<app_name>//<full_path>//<username>  reply
    2//<peer_id>                                            heartbeat
    3//<peer_id>                                            leave

`//` is the field delimiter and is forbidden inside fields (no escaping;
encode rejects instead). Newlines are likewise forbidden. requester_ip
must be a dotted-quad IPv4 address and is validated on both encode and
decode. Encoding is deterministic: same datagram, same bytes.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, fields

from appshare.errors import (
    BadEncodingError,
    DelimiterInFieldError,
    EmptyFieldError,
    FieldCountMismatchError,
    InvalidFieldError,
    UnknownTypeError,
)

DELIMITER = "//"


@dataclass(frozen=True)
class Query:
    app_name: str


@dataclass(frozen=True)
class Reply:
    requester_ip: str
    app_name: str
    full_path: str
    username: str


@dataclass(frozen=True)
class Heartbeat:
    peer_id: str


@dataclass(frozen=True)
class Leave:
    peer_id: str


ClusterDatagram = Query | Reply | Heartbeat | Leave

_TYPE_TAGS = {Query: 0, Reply: 1, Heartbeat: 2, Leave: 3}
_TAG_TYPES = {tag: cls for cls, tag in _TYPE_TAGS.items()}


def is_dotted_quad(value: str) -> bool:
    try:
        ipaddress.IPv4Address(value)
    except ValueError:
        return False
    return "." in value  # reject integer forms like "3232235527"


def _check_fields(d: ClusterDatagram) -> list[str]:
    values = []
    for f in fields(d):
        value = getattr(d, f.name)
        if not value:
            raise EmptyFieldError(f"{type(d).__name__}.{f.name} is empty")
        if DELIMITER in value or "\n" in value or "\r" in value:
            raise DelimiterInFieldError(
                f"{type(d).__name__}.{f.name} contains '//' or a newline"
            )
        values.append(value)
    if isinstance(d, Reply) and not is_dotted_quad(d.requester_ip):
        raise InvalidFieldError(f"requester_ip {d.requester_ip!r} is not dotted-quad IPv4")
    return values


def encode_datagram(d: ClusterDatagram) -> bytes:
    try:
        tag = _TYPE_TAGS[type(d)]
    except KeyError:
        raise TypeError(f"not a cluster datagram: {type(d).__name__}") from None
    parts = [str(tag), *_check_fields(d)]
    return DELIMITER.join(parts).encode("utf-8")


def decode_datagram(b: bytes) -> ClusterDatagram:
    try:
        text = b.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadEncodingError(f"datagram is not UTF-8: {exc}") from None
    parts = text.split(DELIMITER)
    try:
        tag = int(parts[0])
    except ValueError:
        tag = -1
    cls = _TAG_TYPES.get(tag)
    if cls is None or str(tag) != parts[0]:
        raise UnknownTypeError(f"unknown datagram type tag {parts[0]!r}")
    n_fields = len(fields(cls))
    if len(parts) - 1 != n_fields:
        raise FieldCountMismatchError(
            f"type {tag} expects {n_fields} fields, got {len(parts) - 1}"
        )
    d = cls(*parts[1:])
    _check_fields(d)
    return d
