"""Application pool: which local apps exist and which are offered for sharing.

The pool is populated from a manifest file (one app per line) instead of
an installed-software scan, which keeps the data flow portable:

    # app_name|full_path|username[|shared]
    winword.exe|C:\\Program Files\\Microsoft Office\\winword.exe|guest2
    mspaint.exe|C:\\Windows\\System32\\mspaint.exe|guest2|shared

The fourth column is optional and defaults to unshared; save_manifest
writes it so that sharing flags survive a save/load round trip.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from appshare.errors import DuplicateAppError, ManifestParseError, UnknownAppError


@dataclass
class AppEntry:
    app_name: str
    full_path: str
    username: str
    shared: bool = False


class AppPool:
    def __init__(self, entries: list[AppEntry] | None = None):
        self._entries: dict[str, AppEntry] = {}
        for entry in entries or []:
            self.add(entry)

    def add(self, entry: AppEntry) -> None:
        if entry.app_name in self._entries:
            raise DuplicateAppError(f"app {entry.app_name!r} listed twice")
        if not entry.full_path:
            raise ValueError(f"app {entry.app_name!r} has an empty full_path")
        self._entries[entry.app_name] = entry

    def lookup(self, app_name: str) -> AppEntry | None:
        return self._entries.get(app_name)

    def set_shared(self, app_name: str, flag: bool) -> None:
        entry = self._entries.get(app_name)
        if entry is None:
            raise UnknownAppError(f"app {app_name!r} not in pool")
        entry.shared = flag

    def is_shared(self, app_name: str) -> bool:
        entry = self._entries.get(app_name)
        return entry is not None and entry.shared

    def entries(self) -> list[AppEntry]:
        return list(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, app_name: str) -> bool:
        return app_name in self._entries


def load_manifest(path: str | Path) -> AppPool:
    pool = AppPool()
    path = Path(path)
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) not in (3, 4):
            raise ManifestParseError(
                str(path), lineno, f"expected app|path|username[|shared], got {raw!r}"
            )
        shared = False
        if len(parts) == 4:
            if parts[3] not in ("shared", "unshared"):
                raise ManifestParseError(
                    str(path), lineno, f"4th field must be shared|unshared, got {parts[3]!r}"
                )
            shared = parts[3] == "shared"
        app_name, full_path, username = parts[:3]
        if not app_name or not full_path or not username:
            raise ManifestParseError(str(path), lineno, "empty field")
        try:
            pool.add(AppEntry(app_name, full_path, username, shared))
        except DuplicateAppError:
            raise DuplicateAppError(
                f"{path}:{lineno}: app {app_name!r} listed twice"
            ) from None
    return pool


def save_manifest(pool: AppPool, path: str | Path) -> None:
    lines = ["# app_name|full_path|username|shared"]
    for e in pool.entries():
        flag = "shared" if e.shared else "unshared"
        lines.append(f"{e.app_name}|{e.full_path}|{e.username}|{flag}")
    Path(path).write_text("\n".join(lines) + "\n")
