"""Append-only store behind the Remote Logger."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path


class LogStoreClosed(RuntimeError):
    pass


@dataclass(frozen=True)
class LogEntry:
    time: float
    source: str
    level: str
    text: str


class LogStore:
    """In-memory log with an optional line-delimited JSON mirror on disk."""

    def __init__(self, path: str | Path | None = None):
        self._entries: list[LogEntry] = []
        self._lock = threading.Lock()
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self.closed = False

    def append(self, entry: LogEntry) -> int:
        with self._lock:
            if self.closed:
                raise LogStoreClosed("log store is closed")
            self._entries.append(entry)
            if self._fh:
                self._fh.write(json.dumps(asdict(entry)) + "\n")
                self._fh.flush()
            return len(self._entries) - 1

    def entries(self, source: str | None = None) -> list[LogEntry]:
        with self._lock:
            return [e for e in self._entries if source is None or e.source == source]

    def sources(self) -> list[str]:
        return sorted({e.source for e in self.entries()})

    def __len__(self) -> int:
        return len(self._entries)

    def close(self):
        with self._lock:
            self.closed = True
            if self._fh:
                self._fh.close()
                self._fh = None


def remote_logger_append(store: LogStore, entry: LogEntry) -> int:
    """Store one entry; the returned position serves as the acknowledgement."""
    return store.append(entry)
