"""Routing-table entries and via stream admission shared by the protocols."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class _Marker(enum.Enum):
    DIRECT = "DIRECT"
    UNSET = "UNSET"

    def __repr__(self) -> str:
        return self.value


DIRECT = _Marker.DIRECT
UNSET = _Marker.UNSET

DEFAULT_REVALIDATE_MS = 60_000.0
DEFAULT_VIA_TIMEOUT_FACTOR = 3.0
DEFAULT_STREAM_IDLE_MS = 30_000.0


def via_label(via) -> str:
    if isinstance(via, _Marker):
        return via.value
    if via is None:
        return "NONE"
    return str(via)


@dataclass
class RouteEntry:
    """One ``(circ, prev, next)`` row; ``via`` is a relay id, DIRECT or UNSET."""

    circ: int
    prev: int
    next: int
    via: object = UNSET
    installed_at: float = 0.0
    revalidate_after: float = DEFAULT_REVALIDATE_MS
    raced_rtt: float | None = None

    def due(self, now: float) -> bool:
        return self.via is UNSET or now >= self.installed_at + self.revalidate_after

    def via_timeout(self, factor: float = DEFAULT_VIA_TIMEOUT_FACTOR) -> float:
        return factor * (self.raced_rtt or 0.0)


class ViaRoutingTable:
    """Routing rows held by one relay, keyed by ``(circ, prev, next)``."""

    def __init__(self, owner: int):
        self.owner = owner
        self.entries: dict[tuple[int, int, int], RouteEntry] = {}

    def get(self, circ: int, prev: int, nxt: int) -> RouteEntry | None:
        return self.entries.get((circ, prev, nxt))

    def put(self, entry: RouteEntry) -> None:
        self.entries[(entry.circ, entry.prev, entry.next)] = entry

    def remove(self, circ: int, prev: int, nxt: int) -> None:
        self.entries.pop((circ, prev, nxt), None)

    def __len__(self) -> int:
        return len(self.entries)

    def rows(self):
        for key in sorted(self.entries):
            yield self.entries[key]


@dataclass
class ViaStreamTable:
    """Active via streams at one relay with a hard capacity.

    A stream is identified by its ``(circ, prev, next)`` leg and expires
    after ``idle_ms`` without traffic. Admission order is kept so that a
    capacity cut evicts the most recently admitted streams first.
    """

    capacity: int
    idle_ms: float = DEFAULT_STREAM_IDLE_MS
    streams: dict[tuple[int, int, int], float] = field(default_factory=dict)

    def expire(self, now: float) -> None:
        stale = [k for k, t in self.streams.items() if now - t > self.idle_ms]
        for k in stale:
            del self.streams[k]

    def active(self, now: float) -> int:
        self.expire(now)
        return len(self.streams)

    def has(self, key: tuple[int, int, int], now: float) -> bool:
        self.expire(now)
        return key in self.streams

    def admit(self, key: tuple[int, int, int], now: float) -> bool:
        """Refresh an existing stream or open a new one if capacity allows."""
        self.expire(now)
        if key in self.streams:
            self.streams[key] = now
            return True
        if len(self.streams) >= self.capacity:
            return False
        self.streams[key] = now
        return True

    def set_capacity(self, capacity: int) -> list[tuple[int, int, int]]:
        """Change capacity, evicting streams ranked at or past the new limit."""
        self.capacity = capacity
        keys = list(self.streams)
        evicted = keys[capacity:]
        for k in evicted:
            del self.streams[k]
        return evicted
