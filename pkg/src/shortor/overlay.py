"""Full protocol simulation: latency bootstrap, circuit traffic, races, failover.

Every circuit carries a forward stream (guard to exit) and, when ``echo``
is on, a reverse stream the server sends back for each delivered cell.
Each circuit relay sequences cells per direction, so duplicates created by
races or resends are discarded and delivery order is preserved.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from shortor.errors import LoopViolation, TopologyError
from shortor.latency_tables import LatencyConfig, LatencyState, RttTable
from shortor.pathsel import Circuit
from shortor.race import (
    DIRECT_KEY,
    BackoffConfig,
    BackoffEvent,
    BackoffState,
    RaceResponder,
    SeenSet,
    backoff_update,
)
from shortor.routes import (
    DIRECT,
    UNSET,
    RouteEntry,
    ViaRoutingTable,
    ViaStreamTable,
    via_label,
)
from shortor.simnet import Cell, CellCmd, QueueClass, Simulator
from shortor.topology import LatencyMatrix, RelayDescriptor
from shortor.via_routing import handle_via, loop_filter, steer

CLIENT = -1
SERVER = -2
FWD = "F"
REV = "R"

_DATA_CMDS = (CellCmd.RELAY, CellCmd.VIA, CellCmd.RACE)


@dataclass(frozen=True)
class ChurnEvent:
    time_ms: float
    relay: int
    capacity: int


@dataclass
class OverlayConfig:
    shortor_enabled: bool = True
    forward_delay_ms: float = 1.0
    service_ms: float = 0.1
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    ping_mode: str = "analytic"  # or "simulated"
    ping_interval_ms: float = 100.0
    table_update_ms: float = 2000.0
    traffic_start_ms: float = 2500.0
    cells_per_circuit: int = 5
    cell_interval_ms: float = 1000.0
    circuit_stagger_ms: float = 10.0
    echo: bool = True
    backoff: BackoffConfig = field(default_factory=BackoffConfig)
    race_window_ms: float = 30_000.0
    via_timeout_factor: float = 3.0
    min_via_timeout_ms: float = 0.0
    revalidate_ms: float = 60_000.0
    stream_idle_ms: float = 30_000.0
    horizon_ms: float | None = None
    churn: list[ChurnEvent] = field(default_factory=list)
    record_trace: bool = True
    record_legs: bool = False

    def __post_init__(self):
        if self.ping_mode not in ("analytic", "simulated"):
            raise ValueError("ping_mode must be 'analytic' or 'simulated'")
        if self.traffic_start_ms < self.table_update_ms:
            raise ValueError("traffic must start after the first table update")


@dataclass
class _Race:
    nonce: int
    relay: int
    circ: int
    nxt: int
    start: float
    candidates: tuple[int, ...]
    arrivals: dict = field(default_factory=dict)
    dropped: list = field(default_factory=list)
    winner: object = UNSET
    resolved_at: float | None = None


@dataclass
class _Hop:
    circ: int
    direction: str
    relay: int
    prev: int
    nxt: int


class OverlaySim:
    """One simulation run over fixed relays, matrix and circuits."""

    def __init__(
        self,
        relays: Sequence[RelayDescriptor],
        matrix: LatencyMatrix,
        circuits: Sequence[Circuit],
        cfg: OverlayConfig | None = None,
        seed: int = 0,
    ):
        self.cfg = cfg or OverlayConfig()
        self.relays = list(relays)
        self.matrix = matrix
        self.circuits = list(circuits)
        self.rng = np.random.default_rng(seed)
        cfg = self.cfg
        self.sim = Simulator(matrix, cfg.forward_delay_ms, cfg.service_ms, handler=self._on_deliver,
                             record_trace=cfg.record_trace)
        n = matrix.n
        self.participating = {
            r.id for r in self.relays if cfg.shortor_enabled and r.supports_shortor
        }
        self.latency = LatencyState(cfg.latency)
        self.tables = [ViaRoutingTable(i) for i in range(n)]
        self.via_routes = [ViaRoutingTable(i) for i in range(n)]
        self.streams = [ViaStreamTable(r.via_capacity, cfg.stream_idle_ms) for r in self.relays]
        self.seen = [SeenSet(cfg.race_window_ms) for _ in range(n)]
        self.responders = [
            RaceResponder(self.sim, i, self.seen[i], self._race_copy_handler(i)) for i in range(n)
        ]
        self.backoff = BackoffState()
        self._nonce = itertools.count(1)

        self.paths: dict[tuple[int, str], tuple[int, int, int]] = {}
        for c, circ in enumerate(self.circuits):
            g, m, e = circ.relays
            for a, b in ((g, m), (m, e)):
                if not (matrix.has(a, b) and matrix.has(b, a)):
                    raise TopologyError(f"circuit {c} uses missing link {a}<->{b}")
            self.paths[(c, FWD)] = (g, m, e)
            self.paths[(c, REV)] = (e, m, g)

        self.racing: dict[tuple[int, int, int], _Race] = {}
        self.races: list[_Race] = []
        self._race_by_nonce: dict[int, _Race] = {}
        self._recv: dict[tuple[int, str, int], list] = {}
        self._next_seq: dict[tuple[int, str], int] = {}
        self._ping_sent: dict[int, tuple[int, int, float]] = {}
        self._ping_obs: dict[int, dict[int, float]] = {}

        self.injected: dict[tuple[int, str], list[bytes]] = {}
        self.delivered: dict[tuple[int, str], list[bytes]] = {}
        self.delivered_paths: list[tuple[int, str, int, tuple[int, ...]]] = []
        self.legs: dict[tuple[int, str, int, int, int], list] = {}
        self.swaps: list[tuple[float, int, int, int, str, str]] = []
        self.backoff_log: list[tuple[float, int, int, float]] = []
        self.race_starts: list[tuple[float, int, int, int, tuple[int, ...]]] = []
        self.failovers: list[tuple[float, int, int, int, int]] = []
        self.copies_created = 0
        self.copies_delivered = 0
        self.copy_drops: Counter[str] = Counter()
        self._scheduled = False

    # ------------------------------------------------------------ helpers

    def _hop(self, c: int, d: str, relay: int) -> _Hop:
        path = self.paths[(c, d)]
        i = path.index(relay)
        prev = path[i - 1] if i > 0 else (CLIENT if d == FWD else SERVER)
        return _Hop(c, d, relay, prev, path[i + 1])

    def _other_leg_vias(self, c: int, d: str, relay: int, nxt: int) -> set[int]:
        path = self.paths[(c, d)]
        out: set[int] = set()
        for a, b in zip(path, path[1:]):
            if (a, b) == (relay, nxt):
                continue
            prev = path[path.index(a) - 1] if a != path[0] else (CLIENT if d == FWD else SERVER)
            e = self.tables[a].get(c, prev, b)
            if e is not None and isinstance(e.via, int):
                out.add(e.via)
            race = self.racing.get((c, a, b))
            if race is not None:
                out.update(race.candidates)
        return out

    def _drop(self, relay: int, cell: Cell, reason: str) -> None:
        self.sim.drop(relay, cell, reason)
        if cell.cmd in _DATA_CMDS:
            self.copy_drops[reason] += 1

    # ------------------------------------------------------------ setup

    def schedule(self) -> None:
        if self._scheduled:
            return
        self._scheduled = True
        cfg = self.cfg
        if self.participating:
            self._schedule_latency_round(0.0)
        for ev in sorted(cfg.churn, key=lambda e: (e.time_ms, e.relay)):
            self.sim.schedule_timer(ev.time_ms, ev.relay,
                                    lambda ev=ev: self._apply_churn(ev), "churn")
        for c in range(len(self.circuits)):
            t0 = cfg.traffic_start_ms + c * cfg.circuit_stagger_ms
            g = self.paths[(c, FWD)][0]
            for k in range(cfg.cells_per_circuit):
                self.sim.schedule_timer(t0 + k * cfg.cell_interval_ms, g,
                                        lambda c=c: self._inject(c, FWD), "inject")

    def _schedule_latency_round(self, t0: float) -> None:
        cfg = self.cfg
        members = sorted(self.participating)
        if cfg.ping_mode == "simulated":
            for o in members:
                self._ping_obs[o] = {}
                for x in members:
                    if x == o or not (self.matrix.has(o, x) and self.matrix.has(x, o)):
                        continue
                    for k in range(cfg.latency.ping_samples):
                        nonce = next(self._nonce)
                        at = t0 + k * cfg.ping_interval_ms
                        self._ping_sent[nonce] = (o, x, at)
                        self.sim.schedule_send(o, x, Cell(CellCmd.PING, -1, prev=o, next=x,
                                                          nonce=nonce), at)
        self.sim.schedule_timer(t0 + cfg.table_update_ms, members[0],
                                lambda: self._table_update(t0), "table-update")

    def _table_update(self, t0: float) -> None:
        cfg = self.cfg
        members = sorted(self.participating)
        if cfg.ping_mode == "simulated":
            tables = {}
            for o in members:
                tables[o] = RttTable(o, dict(self._ping_obs.get(o, {})),
                                     epoch=self.latency.epoch + 1)
            self.latency.set_rtts(tables)
            self.latency.refresh()
        else:
            built = LatencyState.build(
                [r for r in self.relays if r.id in self.participating], self.matrix, cfg.latency
            )
            self.latency.rtt = built.rtt
            self.latency.refresh()
        nxt = t0 + cfg.latency.update_period_ms
        if cfg.horizon_ms is not None and nxt <= cfg.horizon_ms:
            self._schedule_latency_round(nxt)

    def _apply_churn(self, ev: ChurnEvent) -> None:
        self.streams[ev.relay].set_capacity(ev.capacity)

    # ------------------------------------------------------------ traffic

    def _inject(self, c: int, d: str) -> None:
        seq = self._next_seq.get((c, d), 0)
        self._next_seq[(c, d)] = seq + 1
        payload = f"{c}:{d}:{seq}".encode()
        self.injected.setdefault((c, d), []).append(payload)
        first = self.paths[(c, d)][0]
        cell = Cell(CellCmd.RELAY, c, seq=seq, payload=payload, stream_tag=d, path=(first,))
        self.copies_created += 1
        self._forward(first, cell)

    def _forward(self, relay: int, cell: Cell) -> None:
        self.sim.enqueue(relay, cell, QueueClass.CIRCUIT,
                         on_depart=lambda cl, t, r=relay: self._depart(r, cl))

    def _on_deliver(self, sender: int, relay: int, cell: Cell) -> None:
        cmd = cell.cmd
        if cmd == CellCmd.RELAY:
            self._arrive(relay, cell, sender, sender)
        elif cmd == CellCmd.VIA:
            if relay == cell.next:
                self._arrive(relay, cell, cell.prev, sender)
            else:
                self._via_data(relay, sender, cell)
        elif cmd == CellCmd.RACE:
            if relay == cell.next:
                self.responders[relay].receive(sender, cell)
            else:
                self._via_race(relay, sender, cell)
        elif cmd == CellCmd.RACE_RESP:
            self._race_resp(relay, cell)
        elif cmd == CellCmd.PING:
            if relay in self.participating:
                self.sim.schedule_send(relay, sender, Cell(CellCmd.PING_RESP, -1, prev=relay,
                                                           next=sender, nonce=cell.nonce))
        elif cmd == CellCmd.PING_RESP:
            o, x, at = self._ping_sent.pop(cell.nonce)
            sample = self.sim.now - at
            obs = self._ping_obs.setdefault(o, {})
            obs[x] = min(obs.get(x, math.inf), sample)

    def _arrive(self, relay: int, cell: Cell, hop_src: int, sender: int) -> None:
        c, d = cell.circ, cell.stream_tag
        cell = dataclasses.replace(cell, cmd=CellCmd.RELAY, prev=None, next=None, nonce=0,
                                   path=cell.path + (relay,))
        path = self.paths.get((c, d))
        if path is None or relay not in path[1:] or path[path.index(relay) - 1] != hop_src:
            self._drop(relay, cell, "UNKNOWN_CIRCUIT")
            return
        key = (c, d, relay)
        state = self._recv.get(key)
        if state is None:
            state = self._recv[key] = [0, {}]
        expected, buf = state
        if cell.seq < expected or cell.seq in buf:
            self._drop(relay, cell, "DUPLICATE")
            return
        if self.cfg.record_legs:
            leg = self.legs.get((c, d, hop_src, relay, cell.seq))
            if leg is not None and leg[1] is None:
                leg[1] = self.sim.now
                leg[2] = sender if sender != hop_src else None
        buf[cell.seq] = cell
        while state[0] in buf:
            ready = buf.pop(state[0])
            state[0] += 1
            self._process(relay, ready)

    def _process(self, relay: int, cell: Cell) -> None:
        c, d = cell.circ, cell.stream_tag
        path = self.paths[(c, d)]
        if relay != path[-1]:
            self._forward(relay, cell)
            return
        self.copies_delivered += 1
        self.delivered.setdefault((c, d), []).append(cell.payload)
        self.delivered_paths.append((c, d, cell.seq, cell.path))
        if d == FWD and self.cfg.echo:
            self._inject(c, REV)

    # ------------------------------------------------------------ routing

    def _send_direct(self, relay: int, nxt: int, cell: Cell) -> None:
        self.sim.schedule_send(relay, nxt, cell)

    def _depart(self, relay: int, cell: Cell) -> None:
        hop = self._hop(cell.circ, cell.stream_tag, relay)
        now = self.sim.now
        if self.cfg.record_legs:
            self.legs.setdefault((hop.circ, hop.direction, relay, hop.nxt, cell.seq),
                                 [now, None, None])
        if relay not in self.participating:
            self._send_direct(relay, hop.nxt, cell)
            return
        entry = self.tables[relay].get(hop.circ, hop.prev, hop.nxt)
        racing = (hop.circ, relay, hop.nxt) in self.racing
        if not racing and (entry is None or entry.due(now)):
            self._start_race(hop, cell, entry)
            return
        self._route(hop, entry, cell)

    def _route(self, hop: _Hop, entry: RouteEntry | None, cell: Cell) -> None:
        nxt_hop, out = steer(entry, cell, hop.relay, hop.nxt)
        self.sim.schedule_send(hop.relay, nxt_hop, out)
        if nxt_hop != hop.nxt:
            timeout = max(entry.via_timeout(self.cfg.via_timeout_factor),
                          self.cfg.min_via_timeout_ms)
            via = entry.via
            self.sim.schedule_timer(self.sim.now + timeout, hop.relay,
                                    lambda: self._check_via(hop, via, cell), "via-check")

    def _candidates(self, hop: _Hop) -> list[int]:
        now = self.sim.now
        circuit = self.paths[(hop.circ, FWD)]
        assigned = self._other_leg_vias(hop.circ, hop.direction, hop.relay, hop.nxt)
        out = []
        for v in self.latency.vias_for(hop.relay, hop.nxt):
            if not loop_filter(circuit, assigned, v, self.relays):
                continue
            if not self.backoff.eligible(hop.relay, v, now):
                continue
            out.append(v)
        return out

    def _install(self, hop: _Hop, via, raced_rtt: float | None) -> RouteEntry:
        now = self.sim.now
        table = self.tables[hop.relay]
        old = table.get(hop.circ, hop.prev, hop.nxt)
        entry = RouteEntry(hop.circ, hop.prev, hop.nxt, via=via, installed_at=now,
                           revalidate_after=self.cfg.revalidate_ms, raced_rtt=raced_rtt)
        table.put(entry)
        if old is not None and old.via is not UNSET and old.via != via:
            self.swaps.append((now, hop.relay, hop.circ, hop.nxt, via_label(old.via),
                               via_label(via)))
        return entry

    def _start_race(self, hop: _Hop, cell: Cell, old: RouteEntry | None) -> None:
        now = self.sim.now
        cands = tuple(self._candidates(hop))
        self.race_starts.append((now, hop.relay, hop.circ, hop.nxt, cands))
        if not cands:
            entry = self._install(hop, DIRECT, None)
            self._route(hop, entry, cell)
            return
        nonce = next(self._nonce)
        race = _Race(nonce, hop.relay, hop.circ, hop.nxt, now, cands)
        self.racing[(hop.circ, hop.relay, hop.nxt)] = race
        self.races.append(race)
        self._race_by_nonce[nonce] = race
        rc = dataclasses.replace(cell, cmd=CellCmd.RACE, prev=hop.relay, next=hop.nxt,
                                 nonce=nonce)
        for v in cands:
            self.sim.schedule_send(hop.relay, v, rc)
        self.copies_created += len(cands)
        self.sim.schedule_send(hop.relay, hop.nxt, rc)

    def _via_race(self, relay: int, sender: int, cell: Cell) -> None:
        now = self.sim.now
        key = (cell.circ, cell.prev, cell.next)
        if relay not in self.participating or not self.streams[relay].admit(key, now):
            self._drop(relay, cell, "VIA_OVERLOAD")
            race = self._race_by_nonce.get(cell.nonce)
            if race is not None:
                race.dropped.append(relay)
            self._backoff_drop(cell.prev, relay)
            return
        self.via_routes[relay].put(RouteEntry(cell.circ, cell.prev, cell.next, installed_at=now))
        fwd = dataclasses.replace(cell, path=cell.path + (relay,))
        self.sim.enqueue(relay, fwd, QueueClass.VIA, next_hop=cell.next)

    def _via_data(self, relay: int, sender: int, cell: Cell) -> None:
        nxt, reason = handle_via(self.via_routes[relay], self.streams[relay], cell, self.sim.now)
        if nxt is None:
            self._drop(relay, cell, reason)
            return
        fwd = dataclasses.replace(cell, path=cell.path + (relay,))
        self.sim.enqueue(relay, fwd, QueueClass.VIA, next_hop=nxt)

    def _race_copy_handler(self, relay: int):
        def on_copy(sender: int, cell: Cell, resp: Cell | None) -> None:
            race = self._race_by_nonce.get(cell.nonce)
            if race is not None:
                race.arrivals[DIRECT_KEY if sender == cell.prev else sender] = self.sim.now
            if resp is not None:
                self.sim.schedule_send(relay, cell.prev, resp)
            self._arrive(relay, cell, cell.prev, sender)

        return on_copy

    def _race_resp(self, relay: int, resp: Cell) -> None:
        key = (resp.circ, relay, resp.prev)
        race = self.racing.get(key)
        if race is None or race.nonce != resp.nonce:
            return
        del self.racing[key]
        now = self.sim.now
        winner = resp.via
        d = self._direction_of(resp.circ, relay, resp.prev)
        hop = self._hop(resp.circ, d, relay)
        if winner is not None:
            circuit = self.paths[(hop.circ, FWD)]
            assigned = self._other_leg_vias(hop.circ, d, relay, hop.nxt)
            if winner not in race.candidates or not loop_filter(circuit, assigned, winner,
                                                                 self.relays):
                raise LoopViolation(f"race winner {winner} invalid for circuit {hop.circ}")
            backoff_update(self.backoff, (relay, winner), BackoffEvent.SUCCEEDED, now, self.rng,
                           self.cfg.backoff)
        race.winner = DIRECT if winner is None else winner
        race.resolved_at = now
        self._install(hop, race.winner, now - race.start)

    def _direction_of(self, c: int, relay: int, nxt: int) -> str:
        g, m, e = self.paths[(c, FWD)]
        return FWD if (relay, nxt) in ((g, m), (m, e)) else REV

    def _backoff_drop(self, relay: int, via: int) -> None:
        now = self.sim.now
        backoff_update(self.backoff, (relay, via), BackoffEvent.DROPPED, now, self.rng,
                       self.cfg.backoff)
        self.backoff_log.append((now, relay, via, self.backoff.eligible_at(relay, via)))

    def _check_via(self, hop: _Hop, via: int, cell: Cell) -> None:
        state = self._recv.get((hop.circ, hop.direction, hop.nxt))
        if state is not None and (cell.seq < state[0] or cell.seq in state[1]):
            return
        now = self.sim.now
        entry = self.tables[hop.relay].get(hop.circ, hop.prev, hop.nxt)
        if entry is not None and entry.via == via:
            self._backoff_drop(hop.relay, via)
            self.tables[hop.relay].remove(hop.circ, hop.prev, hop.nxt)
            self.failovers.append((now, hop.relay, hop.circ, hop.nxt, via))
        self.copies_created += 1
        self._depart(hop.relay, cell)

    # ------------------------------------------------------------ running

    def run(self) -> "OverlaySim":
        self.schedule()
        if self.cfg.horizon_ms is None:
            self.sim.run_until_quiescent()
        else:
            self.sim.run_until(self.cfg.horizon_ms)
        return self

    # ------------------------------------------------------------ reports

    def live_copies(self) -> int:
        n = sum(1 for e in self.sim._heap if e.cell is not None and e.cell.cmd in _DATA_CMDS)
        n += sum(1 for q in self.sim.queues for item in itertools.chain(q.circuit_queue,
                                                                          q.via_queue)
                 if item.cell.cmd in _DATA_CMDS)
        n += sum(len(s[1]) for s in self._recv.values())
        for batch in self.responders:
            n += sum(len(b) for b in batch._batches.values())
        return n

    def conservation(self) -> dict:
        dropped = sum(self.copy_drops.values())
        live = self.live_copies()
        return {
            "created": self.copies_created,
            "delivered": self.copies_delivered,
            "dropped": dropped,
            "live": live,
            "balanced": self.copies_created == self.copies_delivered + dropped + live,
        }

    def race_rows(self) -> list[list]:
        rows = []
        for r in self.races:
            via_times = [t for k, t in r.arrivals.items() if k != DIRECT_KEY]
            direct = r.arrivals.get(DIRECT_KEY)
            rows.append([
                repr(r.start), r.relay, r.nxt, r.circ, via_label(r.winner),
                "" if direct is None else repr(direct - r.start),
                "" if not via_times else repr(min(via_times) - r.start),
            ])
        return rows

    def routing_rows(self) -> list[list]:
        rows = []
        for table in self.tables:
            for e in table.rows():
                rows.append([table.owner, e.circ, e.prev, e.next, via_label(e.via),
                             repr(e.installed_at)])
        return rows

    def leg_times(self, c: int, a: int, b: int, d: str) -> list[tuple[int, float, object]]:
        """``(seq, one-way ms, via or None)`` for every measured crossing of hop a->b."""
        out = []
        for (cc, dd, x, y, seq), (t0, t1, via) in sorted(self.legs.items()):
            if (cc, dd, x, y) == (c, d, a, b) and t1 is not None:
                out.append((seq, t1 - t0, via))
        return out

    def write_outputs(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "race_log.csv", ["time_ms", "src", "dst", "circ", "winner", "direct_ms",
                                      "best_via_ms"], self.race_rows())
        _write(out / "routing.csv", ["relay", "circ", "prev", "next", "via", "installed_at_ms"],
               self.routing_rows())
        _write(out / "swaps.csv", ["time_ms", "relay", "circ", "next", "old_via", "new_via"],
               [[repr(t), r, c, n, a, b] for t, r, c, n, a, b in self.swaps])
        _write(out / "drops.csv", ["time_ms", "relay", "reason", "cmd", "circ"],
               [[repr(t), r, why, cmd, c] for t, r, why, cmd, c in self.sim.drop_log])
        if self.cfg.record_trace:
            _write(out / "trace.csv", ["time_ms", "seq", "kind", "src", "dst", "cmd", "circ"],
                   [rec.as_row() for rec in self.sim.trace])
        self.latency.write_csv(out / "nexthop.csv")
        cons = self.conservation()
        _write(out / "conservation.csv", list(cons), [[str(v) for v in cons.values()]])


def _write(path: Path, header: list[str], rows: Iterable[list]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
