"""Directional data races between a direct hop and candidate vias.

The source emits one RACE cell to every candidate via and one straight to
the destination. Vias with spare capacity forward theirs; the destination
answers only the first copy it sees. Copies landing at the same instant
are ordered direct first, then by ascending via id.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from shortor.errors import NoRoute
from shortor.routes import RouteEntry, ViaRoutingTable, ViaStreamTable
from shortor.simnet import (
    DEFAULT_FORWARD_DELAY_MS,
    DEFAULT_SERVICE_MS,
    Cell,
    CellCmd,
    QueueClass,
    Simulator,
)
from shortor.topology import LatencyMatrix

DEFAULT_RACE_WINDOW_MS = 30_000.0
DIRECT_KEY = "direct"


# ----------------------------------------------------------------- Seen set


class SeenSet:
    """Race instances already answered, keyed ``(circ, prev, nonce)``."""

    def __init__(self, window_ms: float = DEFAULT_RACE_WINDOW_MS):
        self.window_ms = window_ms
        self._seen: dict[tuple[int, int, int], float] = {}

    def _expire(self, now: float) -> None:
        if len(self._seen) < 64:
            return
        cutoff = now - self.window_ms
        for k in [k for k, t in self._seen.items() if t < cutoff]:
            del self._seen[k]

    def __contains__(self, key) -> bool:
        return key in self._seen

    def contains(self, key: tuple[int, int, int], now: float) -> bool:
        t = self._seen.get(key)
        return t is not None and now - t <= self.window_ms

    def add(self, key: tuple[int, int, int], now: float) -> None:
        self._expire(now)
        self._seen[key] = now

    def __len__(self) -> int:
        return len(self._seen)


def race_key(cell: Cell) -> tuple[int, int, int]:
    return (cell.circ, cell.prev, cell.nonce)


def race_respond(seen: SeenSet, cell: Cell, sender: int, now: float = 0.0) -> Cell | None:
    """Answer the first copy of a race, or return None for later copies."""
    if cell.cmd != CellCmd.RACE:
        raise ValueError("race_respond expects a RACE cell")
    key = race_key(cell)
    if seen.contains(key, now):
        return None
    seen.add(key, now)
    via = None if cell.prev == sender else sender
    return Cell(CellCmd.RACE_RESP, cell.circ, prev=cell.next, next=cell.prev, via=via,
                nonce=cell.nonce, stream_tag=cell.stream_tag)


def via_forward_race(
    streams: ViaStreamTable,
    cell: Cell,
    now: float = 0.0,
    routes: ViaRoutingTable | None = None,
) -> Cell | None:
    """Admit a RACE cell at a via; None means the via dropped it."""
    if cell.cmd != CellCmd.RACE:
        raise ValueError("via_forward_race expects a RACE cell")
    if not streams.admit((cell.circ, cell.prev, cell.next), now):
        return None
    if routes is not None:
        routes.put(RouteEntry(cell.circ, cell.prev, cell.next, installed_at=now))
    return cell


class RaceResponder:
    """Destination-side batching so that same-instant copies obey the tie rule.

    ``on_copy(sender, cell, resp)`` is called for every copy in batch order;
    ``resp`` is the RACE_RESP for the winning copy and None otherwise.
    """

    def __init__(
        self,
        sim: Simulator,
        relay: int,
        seen: SeenSet,
        on_copy: Callable[[int, Cell, Cell | None], None],
    ):
        self.sim = sim
        self.relay = relay
        self.seen = seen
        self.on_copy = on_copy
        self._batches: dict[tuple[int, int, int], list[tuple[int, Cell]]] = {}

    def receive(self, sender: int, cell: Cell) -> None:
        key = race_key(cell)
        batch = self._batches.get(key)
        if batch is None:
            batch = self._batches[key] = []
            self.sim.schedule_timer(self.sim.now, self.relay, lambda: self._flush(key),
                                    "race-flush")
        batch.append((sender, cell))

    def _flush(self, key) -> None:
        batch = self._batches.pop(key)
        batch.sort(key=lambda sc: (sc[0] != sc[1].prev, sc[0]))
        for sender, cell in batch:
            resp = race_respond(self.seen, cell, sender, self.sim.now)
            self.on_copy(sender, cell, resp)


# ------------------------------------------------------------------ backoff


class BackoffEvent(str, enum.Enum):
    DROPPED = "DROPPED"
    SUCCEEDED = "SUCCEEDED"


@dataclass(frozen=True)
class BackoffConfig:
    base_ms: float = 1000.0
    max_exponent: int = 8
    jitter_low: float = 0.5
    jitter_high: float = 1.5


@dataclass
class BackoffState:
    """``(relay, via) -> (eligible_at, exponent)``."""

    entries: dict[tuple[int, int], tuple[float, int]] = field(default_factory=dict)

    def get(self, relay: int, via: int) -> tuple[float, int]:
        return self.entries.get((relay, via), (-math.inf, 0))

    def eligible(self, relay: int, via: int, now: float) -> bool:
        return now >= self.get(relay, via)[0]

    def eligible_at(self, relay: int, via: int) -> float:
        return self.get(relay, via)[0]


def backoff_update(
    state: BackoffState,
    pair: tuple[int, int],
    event: BackoffEvent,
    now: float,
    rng: np.random.Generator,
    cfg: BackoffConfig = BackoffConfig(),
) -> BackoffState:
    """Apply one drop or success to ``state`` in place and return it."""
    if event == BackoffEvent.SUCCEEDED:
        state.entries[pair] = (now, 0)
        return state
    _, exponent = state.entries.get(pair, (-math.inf, 0))
    draw = float(rng.uniform(cfg.jitter_low, cfg.jitter_high))
    delay = cfg.base_ms * (2.0**exponent) * draw
    state.entries[pair] = (now + delay, min(exponent + 1, cfg.max_exponent))
    return state


# ---------------------------------------------------------------- race run


@dataclass(frozen=True)
class RaceOutcome:
    circ: int
    winner: int | None
    arrival_times: dict
    dropped: tuple[int, ...] = ()
    candidates: tuple[int, ...] = ()
    response_ms: float | None = None
    via_receipts: dict = field(default_factory=dict)

    @property
    def direct_ms(self) -> float | None:
        return self.arrival_times.get(DIRECT_KEY)

    def best_via_ms(self) -> float | None:
        vals = [t for k, t in self.arrival_times.items() if k != DIRECT_KEY]
        return min(vals) if vals else None


def race_run(
    matrix: LatencyMatrix,
    src: int,
    dst: int,
    circ: int,
    candidates: Sequence[int],
    now: float = 0.0,
    *,
    forward_delay_ms: float | Sequence[float] | Mapping[int, float] = DEFAULT_FORWARD_DELAY_MS,
    service_ms: float = DEFAULT_SERVICE_MS,
    streams: Mapping[int, ViaStreamTable] | None = None,
    nonce: int = 0,
    record_trace: bool = False,
) -> RaceOutcome:
    """Run one race in an isolated event loop and report who arrived first.

    ``streams`` maps via ids to their admission tables (mutated in place);
    vias without an entry have unlimited capacity. Times in the outcome are
    absolute, offset by ``now``.
    """
    sim = Simulator(matrix, forward_delay_ms, service_ms, record_trace=record_trace)
    streams = streams if streams is not None else {}
    seen = SeenSet()
    arrivals: dict = {}
    receipts: dict = {}
    dropped: list[int] = []
    state: dict = {"winner": None, "answered": False, "resp_at": None}

    def on_copy(sender: int, cell: Cell, resp: Cell | None) -> None:
        arrivals[DIRECT_KEY if sender == src else sender] = sim.now
        if resp is None:
            return
        state["answered"] = True
        state["winner"] = resp.via
        if sim.link_ok(dst, src):
            sim.schedule_send(dst, src, resp)
        elif resp.via is not None and sim.link_ok(dst, resp.via) and sim.link_ok(resp.via, src):
            # no reverse direct link: return along the winning via
            sim.schedule_send(dst, resp.via, resp)

    responder = RaceResponder(sim, dst, seen, on_copy)

    def handler(sender: int, relay: int, cell: Cell) -> None:
        if cell.cmd == CellCmd.RACE_RESP:
            if relay == src:
                state["resp_at"] = sim.now
            else:
                sim.enqueue(relay, cell, QueueClass.VIA, next_hop=src)
            return
        if relay == dst:
            responder.receive(sender, cell)
            return
        receipts[relay] = sim.now
        table = streams.get(relay)
        out = cell if table is None else via_forward_race(table, cell, now + sim.now)
        if out is None:
            dropped.append(relay)
            sim.drop(relay, cell, "VIA_OVERLOAD")
            return
        sim.enqueue(relay, out, QueueClass.VIA, next_hop=dst)

    sim.handler = handler
    sent = 0
    order = []
    for v in candidates:
        if v in (src, dst):
            raise ValueError(f"candidate via {v} equals an endpoint")
        if sim.link_ok(src, v) and sim.link_ok(v, dst):
            order.append(v)
    for v in order:
        sim.schedule_send(src, v, Cell(CellCmd.RACE, circ, prev=src, next=dst, nonce=nonce))
        sent += 1
    if sim.link_ok(src, dst):
        sim.schedule_send(src, dst, Cell(CellCmd.RACE, circ, prev=src, next=dst, nonce=nonce))
        sent += 1
    if sent == 0:
        raise NoRoute(f"no usable path from {src} to {dst}")
    sim.run_until_quiescent()
    return RaceOutcome(
        circ=circ,
        winner=state["winner"],
        arrival_times={k: now + t for k, t in arrivals.items()},
        dropped=tuple(dropped),
        candidates=tuple(candidates),
        response_ms=None if state["resp_at"] is None else now + state["resp_at"],
        via_receipts={k: now + t for k, t in receipts.items()},
    )
