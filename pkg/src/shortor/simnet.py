"""Deterministic discrete-event engine for cell delivery between relays.

Events are ordered by ``(time, seq)``. Each relay owns two FIFO output
queues served by a single server: the circuit queue always wins over the
via queue. A queued cell becomes eligible ``forward_delay_ms`` after it was
enqueued, and the server releases at most one cell per ``service_ms``.
"""

from __future__ import annotations

import csv
import enum
import heapq
import itertools
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from shortor.errors import HorizonExceeded, SendOnMissingLink
from shortor.topology import LatencyMatrix

CELL_SIZE_BYTES = 512
DEFAULT_FORWARD_DELAY_MS = 1.0
DEFAULT_SERVICE_MS = 0.1


class CellCmd(str, enum.Enum):
    RELAY = "RELAY"
    VIA = "VIA"
    RACE = "RACE"
    RACE_RESP = "RACE_RESP"
    PING = "PING"
    PING_RESP = "PING_RESP"


class EventKind(str, enum.Enum):
    DELIVER_CELL = "DELIVER_CELL"
    TIMER = "TIMER"


class QueueClass(enum.IntEnum):
    CIRCUIT = 0
    VIA = 1


@dataclass(frozen=True)
class Cell:
    cmd: CellCmd
    circ: int
    prev: int | None = None
    next: int | None = None
    stream_tag: Any = None
    size_bytes: int = CELL_SIZE_BYTES
    seq: int = 0
    via: int | None = None
    nonce: int = 0
    payload: bytes = b""
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if self.cmd in (CellCmd.VIA, CellCmd.RACE) and (self.prev is None or self.next is None):
            raise ValueError(f"{self.cmd.value} cell needs prev and next")


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    target: int = field(compare=False)
    src: int = field(compare=False, default=-1)
    cell: Cell | None = field(compare=False, default=None)
    label: str = field(compare=False, default="")
    callback: Callable[[], None] | None = field(compare=False, default=None, repr=False)


@dataclass(frozen=True)
class TraceRecord:
    time_ms: float
    seq: int
    kind: str
    src: int
    dst: int
    cmd: str
    circ: int | str

    def as_row(self) -> list[str]:
        return [repr(self.time_ms), str(self.seq), self.kind, str(self.src), str(self.dst),
                self.cmd, str(self.circ)]


@dataclass(frozen=True)
class Departure:
    relay: int
    time_ms: float
    enqueued_ms: float
    qclass: QueueClass
    order: int


@dataclass
class _Queued:
    cell: Cell
    enqueued: float
    eligible: float
    order: int
    qclass: QueueClass
    action: Callable[[Cell, float], None]


class RelayQueues:
    """Circuit and via FIFOs at one relay, drained by a single server."""

    def __init__(self, relay: int, forward_delay_ms: float, service_ms: float):
        if forward_delay_ms < 0 or service_ms < 0:
            raise ValueError("forward delay and service time must be non-negative")
        self.relay = relay
        self.forward_delay_ms = forward_delay_ms
        self.service_ms = service_ms
        self.circuit_queue: deque[_Queued] = deque()
        self.via_queue: deque[_Queued] = deque()
        self.busy_until = -math.inf
        self.timer_pending = False

    def __len__(self) -> int:
        return len(self.circuit_queue) + len(self.via_queue)

    def ahead_of(self, qclass: QueueClass) -> int:
        if qclass == QueueClass.CIRCUIT:
            return len(self.circuit_queue)
        return len(self.circuit_queue) + len(self.via_queue)

    def pick(self, now: float) -> _Queued | None:
        # strict priority: an eligible circuit cell always goes first
        if self.circuit_queue and self.circuit_queue[0].eligible <= now:
            return self.circuit_queue.popleft()
        if self.via_queue and self.via_queue[0].eligible <= now:
            return self.via_queue.popleft()
        return None

    def next_wakeup(self) -> float | None:
        heads = [q[0].eligible for q in (self.circuit_queue, self.via_queue) if q]
        if not heads:
            return None
        return max(min(heads), self.busy_until + self.service_ms)


def _as_delay_array(value: float | Sequence[float] | Mapping[int, float] | np.ndarray, n: int):
    if isinstance(value, Mapping):
        arr = np.full(n, DEFAULT_FORWARD_DELAY_MS)
        for k, v in value.items():
            arr[k] = v
        return arr
    if np.isscalar(value):
        return np.full(n, float(value))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"forward delays must have length {n}")
    return arr.copy()


class Simulator:
    """Single-threaded event loop over a latency matrix.

    Cell deliveries are dispatched to ``handler(src, dst, cell)``; timers
    run their callback. ``record_trace`` keeps one :class:`TraceRecord` per
    processed event.
    """

    def __init__(
        self,
        matrix: LatencyMatrix,
        forward_delay_ms: float | Sequence[float] | Mapping[int, float] = DEFAULT_FORWARD_DELAY_MS,
        service_ms: float = DEFAULT_SERVICE_MS,
        handler: Callable[[int, int, Cell], None] | None = None,
        record_trace: bool = True,
        record_departures: bool = False,
        start_ms: float = 0.0,
    ):
        self.matrix = matrix
        self._oneway = matrix.oneway
        self.forward_delay = _as_delay_array(forward_delay_ms, matrix.n)
        self.service_ms = float(service_ms)
        self.handler = handler
        self.record_trace = record_trace
        self.record_departures = record_departures
        self.now = float(start_ms)
        self._heap: list[Event] = []
        self._seq = itertools.count()
        self._order = itertools.count()
        self.trace: list[TraceRecord] = []
        self.departures: list[Departure] = []
        self.queues = [
            RelayQueues(i, float(self.forward_delay[i]), self.service_ms) for i in range(matrix.n)
        ]
        self.sent = 0
        self.delivered = 0
        self.drops: Counter[str] = Counter()
        self.drop_log: list[tuple[float, int, str, str, int]] = []

    # ------------------------------------------------------------ scheduling

    def pending(self) -> int:
        return len(self._heap)

    def in_flight(self) -> int:
        return sum(1 for e in self._heap if e.kind == EventKind.DELIVER_CELL)

    def queued(self) -> int:
        return sum(len(q) for q in self.queues)

    def link_ok(self, src: int, dst: int) -> bool:
        return not math.isnan(self._oneway[src, dst])

    def schedule_send(self, src: int, dst: int, cell: Cell, now: float | None = None) -> Event:
        t0 = self.now if now is None else now
        d = self._oneway[src, dst]
        if math.isnan(d):
            raise SendOnMissingLink(src, dst)
        ev = Event(t0 + float(d), next(self._seq), EventKind.DELIVER_CELL, dst, src=src, cell=cell)
        heapq.heappush(self._heap, ev)
        self.sent += 1
        return ev

    def schedule_timer(
        self, at: float, target: int, callback: Callable[[], None], label: str = "timer"
    ) -> Event:
        if at < self.now:
            at = self.now
        ev = Event(at, next(self._seq), EventKind.TIMER, target, src=target, label=label,
                   callback=callback)
        heapq.heappush(self._heap, ev)
        return ev

    def drop(self, relay: int, cell: Cell, reason: str) -> None:
        self.drops[reason] += 1
        self.drop_log.append((self.now, relay, reason, cell.cmd.value, cell.circ))

    # ---------------------------------------------------------------- queues

    def transit_time(self, relay: int, cell: Cell | None = None,
                     qclass: QueueClass = QueueClass.CIRCUIT) -> float:
        """Forward delay plus ``(cells ahead) * service_ms`` at ``relay``."""
        q = self.queues[relay]
        return q.forward_delay_ms + q.ahead_of(qclass) * q.service_ms

    def enqueue(
        self,
        relay: int,
        cell: Cell,
        qclass: QueueClass,
        next_hop: int | None = None,
        on_depart: Callable[[Cell, float], None] | None = None,
    ) -> None:
        """Queue ``cell`` at ``relay``; at departure either send it to
        ``next_hop`` or call ``on_depart(cell, time)``."""
        if on_depart is None:
            if next_hop is None:
                raise ValueError("enqueue needs next_hop or on_depart")

            def on_depart(c: Cell, t: float, _r=relay, _n=next_hop) -> None:
                self.schedule_send(_r, _n, c, t)

        q = self.queues[relay]
        item = _Queued(cell, self.now, self.now + q.forward_delay_ms, next(self._order), qclass,
                       on_depart)
        (q.circuit_queue if qclass == QueueClass.CIRCUIT else q.via_queue).append(item)
        self._arm(q)

    def _arm(self, q: RelayQueues) -> None:
        if q.timer_pending:
            return
        at = q.next_wakeup()
        if at is None:
            return
        q.timer_pending = True
        self.schedule_timer(at, q.relay, lambda: self._serve(q), "depart")

    def _serve(self, q: RelayQueues) -> None:
        q.timer_pending = False
        item = q.pick(self.now)
        if item is not None:
            q.busy_until = self.now
            if self.record_departures:
                self.departures.append(
                    Departure(q.relay, self.now, item.enqueued, item.qclass, item.order)
                )
            item.action(item.cell, self.now)
        self._arm(q)

    # ------------------------------------------------------------------ loop

    def step(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        if self.record_trace:
            if ev.kind == EventKind.DELIVER_CELL:
                c = ev.cell
                self.trace.append(TraceRecord(ev.time, ev.seq, ev.kind.value, ev.src, ev.target,
                                              c.cmd.value, c.circ))
            else:
                self.trace.append(TraceRecord(ev.time, ev.seq, ev.kind.value, ev.target,
                                              ev.target, ev.label, ""))
        if ev.kind == EventKind.DELIVER_CELL:
            self.delivered += 1
            if self.handler is not None:
                self.handler(ev.src, ev.target, ev.cell)
        elif ev.callback is not None:
            ev.callback()
        return ev

    def run_until(self, horizon_ms: float) -> None:
        """Process every event with time <= horizon, leaving later ones queued."""
        while self._heap and self._heap[0].time <= horizon_ms:
            self.step()
        self.now = max(self.now, horizon_ms)

    def run_until_quiescent(self, horizon_ms: float | None = None) -> list[TraceRecord]:
        """Drain the queue; raise :class:`HorizonExceeded` if events remain
        beyond ``horizon_ms``."""
        while self._heap:
            if horizon_ms is not None and self._heap[0].time > horizon_ms:
                raise HorizonExceeded(horizon_ms, len(self._heap))
            self.step()
        return self.trace


def write_trace_csv(trace: Iterable[TraceRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_ms", "seq", "kind", "src", "dst", "cmd", "circ"])
        for rec in trace:
            w.writerow(rec.as_row())
