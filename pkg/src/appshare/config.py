"""Peer configuration and its key=value config file."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, replace
from pathlib import Path

from appshare.errors import NotClassDError
from appshare.wire.datagrams import is_dotted_quad

DEFAULT_GROUP = "234.5.6.7"
DEFAULT_PORT = 45678


def is_class_d(address: str) -> bool:
    try:
        first = int(address.split(".", 1)[0])
        ipaddress.IPv4Address(address)
    except ValueError:
        return False
    return 224 <= first <= 239


@dataclass(frozen=True)
class PeerConfig:
    multicast_group: str = DEFAULT_GROUP
    multicast_port: int = DEFAULT_PORT
    heartbeat_period: float = 2.0
    query_rebroadcast_period: float = 3.0
    request_timeout: float = 30.0
    peer_id: str = "127.0.0.1"
    max_sessions: int = 5

    def validate(self) -> PeerConfig:
        if not is_class_d(self.multicast_group):
            raise NotClassDError(
                f"{self.multicast_group} is not a class D multicast address"
            )
        if not 0 < self.multicast_port < 65536:
            raise ValueError(f"bad multicast port {self.multicast_port}")
        if not is_dotted_quad(self.peer_id):
            raise ValueError(f"peer_id {self.peer_id!r} must be a dotted-quad IP")
        for name in ("heartbeat_period", "query_rebroadcast_period", "request_timeout"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_sessions < 0:
            raise ValueError("max_sessions must be >= 0")
        return self


# config file keys -> (attribute, parser); periods are milliseconds on disk
_KEYS = {
    "group": ("multicast_group", str),
    "port": ("multicast_port", int),
    "heartbeat_period_ms": ("heartbeat_period", lambda v: int(v) / 1000.0),
    "rebroadcast_period_ms": ("query_rebroadcast_period", lambda v: int(v) / 1000.0),
    "request_timeout_ms": ("request_timeout", lambda v: int(v) / 1000.0),
    "max_sessions": ("max_sessions", int),
    "peer_id": ("peer_id", str),
}


def load_config(path: str | Path) -> PeerConfig:
    """Parse a key=value file (# comments, blank lines ok) into a PeerConfig.

    Unknown keys are rejected; missing keys keep their defaults.
    """
    cfg = PeerConfig()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not value:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        if key not in _KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        attr, parse = _KEYS[key]
        cfg = replace(cfg, **{attr: parse(value)})
    return cfg.validate()
