"""Via selection, loop avoidance and per-cell steering at circuit relays.

These are the pure decision pieces; :mod:`shortor.overlay` wires them into
the event loop.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Iterable, Mapping, Sequence

from shortor.errors import CircuitLengthError, LoopViolation
from shortor.race import RaceOutcome, race_run
from shortor.routes import (
    DEFAULT_REVALIDATE_MS,
    DIRECT,
    UNSET,
    RouteEntry,
    ViaRoutingTable,
    ViaStreamTable,
)
from shortor.simnet import Cell, CellCmd
from shortor.topology import LatencyMatrix, RelayDescriptor


class Leg(str, enum.Enum):
    GUARD_MIDDLE = "GUARD_MIDDLE"
    MIDDLE_EXIT = "MIDDLE_EXIT"


class Direction(str, enum.Enum):
    FORWARD = "FORWARD"
    REVERSE = "REVERSE"


@dataclasses.dataclass(frozen=True)
class ViaAssignment:
    circ: int
    leg: Leg
    direction: Direction
    via: object  # relay id or DIRECT


def circuit_relays(circuit) -> tuple[int, ...]:
    if hasattr(circuit, "guard"):
        return (circuit.guard, circuit.middle, circuit.exit)
    return tuple(circuit)


def _families(ids: Iterable[int], descriptors) -> set[str]:
    if descriptors is None:
        return set()
    out = set()
    for i in ids:
        fam = descriptors[i].family
        if fam is not None:
            out.add(fam)
    return out


def loop_filter(
    circuit,
    already_assigned: Iterable[int],
    candidate: int,
    descriptors: Sequence[RelayDescriptor] | Mapping[int, RelayDescriptor] | None = None,
) -> bool:
    """True iff ``candidate`` may serve as a via for this circuit.

    It must not be a circuit relay, must not already be a via elsewhere on
    the circuit, and must share no family with any circuit relay.
    """
    relays = circuit_relays(circuit)
    if len(relays) != 3:
        raise CircuitLengthError(
            f"CIRCUIT_LENGTH: via routing needs exactly 3 relays, got {len(relays)}"
        )
    if candidate in relays or candidate in set(already_assigned):
        return False
    if descriptors is not None:
        fam = descriptors[candidate].family
        if fam is not None and fam in _families(relays, descriptors):
            return False
    return True


def filter_candidates(
    candidates: Iterable[int],
    circuit,
    already_assigned: Iterable[int] = (),
    descriptors=None,
) -> list[int]:
    assigned = set(already_assigned)
    return [v for v in candidates if loop_filter(circuit, assigned, v, descriptors)]


def choose_via(
    matrix: LatencyMatrix,
    table: ViaRoutingTable,
    circ: int,
    prev: int,
    dst: int,
    candidates: Sequence[int],
    now: float = 0.0,
    *,
    circuit=None,
    already_assigned: Iterable[int] = (),
    descriptors=None,
    forward_delay_ms=1.0,
    service_ms: float = 0.1,
    streams: Mapping[int, ViaStreamTable] | None = None,
    revalidate_after: float = DEFAULT_REVALIDATE_MS,
) -> tuple[RouteEntry, RaceOutcome | None]:
    """Race ``candidates`` for the hop ``table.owner -> dst`` and install the result."""
    src = table.owner
    if not candidates:
        entry = RouteEntry(circ, prev, dst, via=DIRECT, installed_at=now,
                           revalidate_after=revalidate_after)
        table.put(entry)
        return entry, None
    outcome = race_run(matrix, src, dst, circ, candidates, now,
                       forward_delay_ms=forward_delay_ms, service_ms=service_ms, streams=streams)
    winner = outcome.winner
    if winner is not None:
        if winner not in candidates:
            raise LoopViolation(f"race winner {winner} was never a candidate")
        if circuit is not None and not loop_filter(circuit, already_assigned, winner, descriptors):
            raise LoopViolation(f"race winner {winner} fails the loop filter for circuit {circ}")
    rtt = None if outcome.response_ms is None else outcome.response_ms - now
    entry = RouteEntry(
        circ, prev, dst,
        via=DIRECT if winner is None else winner,
        installed_at=now,
        revalidate_after=revalidate_after,
        raced_rtt=rtt,
    )
    table.put(entry)
    return entry, outcome


def steer(entry: RouteEntry | None, cell: Cell, owner: int, nxt: int) -> tuple[int, Cell]:
    """Next hop and (possibly rewritten) cell for default or via routing."""
    if entry is None or entry.via is DIRECT or entry.via is UNSET:
        return nxt, cell
    return entry.via, dataclasses.replace(cell, cmd=CellCmd.VIA, prev=owner, next=nxt)


def handle_via(
    routes: ViaRoutingTable,
    streams: ViaStreamTable,
    cell: Cell,
    now: float,
) -> tuple[int | None, str | None]:
    """Where a via sends a VIA cell: ``(next_hop, None)`` or ``(None, reason)``."""
    if cell.cmd != CellCmd.VIA:
        raise ValueError("handle_via expects a VIA cell")
    if routes.get(cell.circ, cell.prev, cell.next) is None:
        return None, "UNKNOWN_ROUTE"
    if not streams.admit((cell.circ, cell.prev, cell.next), now):
        return None, "VIA_OVERLOAD"
    return cell.next, None
