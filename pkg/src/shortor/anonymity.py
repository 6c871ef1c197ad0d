"""Observation model for corrupted relays and the structural anonymity checks.

An observation point is ``(position, view)`` where ``view`` is the frozenset
of path elements adjacent to that position. A circuit relay also sees the
wire to each neighbor, which is exactly what a via on that wire would see.
"""

from __future__ import annotations

import csv
import enum
import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from shortor.errors import LoopViolation
from shortor.pathsel import (
    Circuit,
    PathSelConfig,
    _Population,
    _probability,
    enumerate_circuits,
)
from shortor.topology import RelayDescriptor

CLIENT = "CLIENT"
SERVER = "SERVER"


class Position(str, enum.Enum):
    GUARD = "GUARD"
    MIDDLE = "MIDDLE"
    EXIT = "EXIT"
    VIA_GM = "VIA_GM"
    VIA_ME = "VIA_ME"


ObservationPoint = tuple  # (Position, frozenset)


def _point(pos: Position, *view) -> tuple:
    return (pos, frozenset(view))


def _relays(circuit) -> tuple[int, int, int]:
    if isinstance(circuit, Circuit):
        return circuit.relays
    g, m, e = circuit
    return g, m, e


def check_vias(circuit, v1: int | None, v2: int | None) -> None:
    g, m, e = _relays(circuit)
    for v in (v1, v2):
        if v is not None and v in (g, m, e):
            raise LoopViolation(f"LOOP_VIOLATION: via {v} is a circuit relay")
    if v1 is not None and v1 == v2:
        raise LoopViolation(f"LOOP_VIOLATION: via {v1} used on both legs")


def relay_points(circuit, v1: int | None, v2: int | None, relay: int) -> frozenset:
    """Observation points a single corrupted ``relay`` gains on this path."""
    g, m, e = _relays(circuit)
    pts = set()
    if relay == g:
        pts |= {_point(Position.GUARD, CLIENT, g, m), _point(Position.VIA_GM, g, m)}
    if relay == m:
        pts |= {_point(Position.MIDDLE, g, m, e), _point(Position.VIA_GM, g, m),
                _point(Position.VIA_ME, m, e)}
    if relay == e:
        pts |= {_point(Position.EXIT, m, e, SERVER), _point(Position.VIA_ME, m, e)}
    if v1 is not None and relay == v1:
        pts.add(_point(Position.VIA_GM, g, m))
    if v2 is not None and relay == v2:
        pts.add(_point(Position.VIA_ME, m, e))
    return frozenset(pts)


def obs(circuit, v1: int | None, v2: int | None, corrupted: Iterable[int]) -> frozenset:
    """Union of observation points of every corrupted relay on the path."""
    check_vias(circuit, v1, v2)
    g, m, e = _relays(circuit)
    on_path = {g, m, e} | {v for v in (v1, v2) if v is not None}
    out: set = set()
    for r in set(corrupted) & on_path:
        out |= relay_points(circuit, v1, v2, r)
    return frozenset(out)


def differential_advantage(circuit, v1: int | None, v2: int | None,
                           corrupted: Iterable[int]) -> bool:
    corrupted = set(corrupted)
    base = obs(circuit, None, None, corrupted)
    with_vias = obs(circuit, v1, v2, corrupted)
    return base < with_vias


def lemma1_condition(circuit, v1: int | None, v2: int | None, corrupted: Iterable[int]) -> bool:
    """A corrupted via sits between two honest consecutive circuit relays."""
    g, m, e = _relays(circuit)
    bad = set(corrupted)
    for v, a, b in ((v1, g, m), (v2, m, e)):
        if v is not None and v in bad and a not in bad and b not in bad:
            return True
    return False


@dataclass
class CheckReport:
    checked: int = 0
    counterexamples: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.counterexamples

    def summary(self, name: str) -> str:
        status = "ok" if self.ok else "FAILED"
        return f"{name}: {self.checked} cases, {len(self.counterexamples)} counterexamples ({status})"


def via_placements(n: int, circuit) -> Iterable[tuple[int | None, int | None]]:
    g, m, e = _relays(circuit)
    others = [x for x in range(n) if x not in (g, m, e)]
    for v1 in [None, *others]:
        for v2 in [None, *others]:
            if v1 is not None and v1 == v2:
                continue
            yield v1, v2


def verify_lemma1(n: int, max_examples: int = 20) -> CheckReport:
    """Exhaustive check over circuits, via placements and all 2^n corruption sets.

    Results depend only on which path members are corrupted, so each
    placement evaluates at most 32 distinct restrictions and every full
    corruption set is then checked by lookup.
    """
    if not 4 <= n <= 10:
        raise ValueError("exhaustive verification is limited to 4 <= n <= 10")
    rep = CheckReport()
    masks = range(1 << n)
    for circ in itertools.permutations(range(n), 3):
        for v1, v2 in via_placements(n, circ):
            members = [*circ, *(v for v in (v1, v2) if v is not None)]
            memo: dict[int, tuple[bool, bool]] = {}
            for mask in masks:
                sub = 0
                for k, r in enumerate(members):
                    if mask >> r & 1:
                        sub |= 1 << k
                res = memo.get(sub)
                if res is None:
                    bad = {r for k, r in enumerate(members) if sub >> k & 1}
                    res = (differential_advantage(circ, v1, v2, bad),
                           lemma1_condition(circ, v1, v2, bad))
                    memo[sub] = res
                rep.checked += 1
                if res[0] != res[1] and len(rep.counterexamples) < max_examples:
                    bad_full = frozenset(i for i in range(n) if mask >> i & 1)
                    rep.counterexamples.append((circ, v1, v2, bad_full, res))
    return rep


def claim2_holds(circuit, v1: int | None, v2: int | None) -> bool:
    """Both vias together see strictly less than the middle relay alone."""
    g, m, e = _relays(circuit)
    vias = {v for v in (v1, v2) if v is not None}
    via_view = obs(circuit, v1, v2, vias)
    middle_view = obs(circuit, v1, v2, {m})
    return via_view < middle_view


def verify_claim2(samples: Iterable[tuple[object, int | None, int | None]]) -> CheckReport:
    rep = CheckReport()
    for circ, v1, v2 in samples:
        rep.checked += 1
        if not claim2_holds(circ, v1, v2):
            rep.counterexamples.append((circ, v1, v2))
    return rep


def all_placements(n: int):
    for circ in itertools.permutations(range(n), 3):
        for v1, v2 in via_placements(n, circ):
            yield circ, v1, v2


def random_placements(n: int, count: int, rng: np.random.Generator):
    for _ in range(count):
        pick = rng.choice(n, size=5, replace=False)
        circ = tuple(int(x) for x in pick[:3])
        v1 = None if rng.random() < 0.25 else int(pick[3])
        v2 = None if rng.random() < 0.25 else int(pick[4])
        yield circ, v1, v2


# ------------------------------------------------ region independence


ViaSelector = Callable[[Circuit], tuple]


def conditional_via_distributions(
    descriptors: Sequence[RelayDescriptor],
    cfg: PathSelConfig,
    client_region: str,
    selector: ViaSelector,
    corrupted_via: int,
) -> dict:
    """``P((v1, v2) | observation at corrupted_via)`` for one client region.

    Keys are ``(observation, (v1, v2))``; each observation's entries sum to 1.
    """
    pop = _Population(descriptors)
    joint: dict = defaultdict(float)
    marginal: dict = defaultdict(float)
    for c in enumerate_circuits(descriptors):
        p = _probability(pop, cfg, c.relays, client_region)
        if p <= 0:
            continue
        v1, v2 = selector(c)
        o = obs(c, v1, v2, {corrupted_via})
        joint[(o, (v1, v2))] += p
        marginal[o] += p
    return {k: v / marginal[k[0]] for k, v in joint.items()}


@dataclass
class Claim3Report:
    max_difference: float
    worst: tuple | None
    compared: int


def compare_regions(
    descriptors: Sequence[RelayDescriptor],
    cfg: PathSelConfig,
    regions: Sequence[str],
    selector: ViaSelector,
    corrupted_vias: Iterable[int] | None = None,
) -> Claim3Report:
    """Largest entrywise gap between client regions' conditional via distributions."""
    vias = range(len(descriptors)) if corrupted_vias is None else corrupted_vias
    worst, worst_key, compared = 0.0, None, 0
    for x in vias:
        dists = [conditional_via_distributions(descriptors, cfg, r, selector, x) for r in regions]
        for a, b in itertools.combinations(range(len(regions)), 2):
            keys = set(dists[a]) | set(dists[b])
            for k in sorted(keys, key=repr):
                compared += 1
                gap = abs(dists[a].get(k, 0.0) - dists[b].get(k, 0.0))
                if gap > worst:
                    worst, worst_key = gap, (x, regions[a], regions[b], k)
    return Claim3Report(worst, worst_key, compared)


# ------------------------------------------------------- network share


@dataclass(frozen=True)
class ShareRow:
    relay: int
    region: str
    tor_share: float
    shortor_share: float
    deployment_k: int | None


def position_counts(circuits: Sequence[Circuit], vias: Sequence[tuple]) -> dict[int, int]:
    counts: dict[int, int] = defaultdict(int)
    for c, (v1, v2) in zip(circuits, vias):
        for r in c.relays:
            counts[r] += 1
        for v in (v1, v2):
            if v is not None:
                counts[v] += 1
    return dict(counts)


def network_share(
    circuits: Sequence[Circuit],
    vias: Sequence[tuple],
    relays: Sequence[RelayDescriptor],
    deployment_k: int | None = None,
) -> list[ShareRow]:
    """Fraction of circuits each relay touches, without and with vias."""
    m = len(circuits)
    tor = np.zeros(len(relays))
    sht = np.zeros(len(relays))
    for c, (v1, v2) in zip(circuits, vias):
        members = set(c.relays)
        for r in members:
            tor[r] += 1
        for r in members | {v for v in (v1, v2) if v is not None}:
            sht[r] += 1
    denom = m if m else 1
    return [ShareRow(r.id, r.region, tor[r.id] / denom, sht[r.id] / denom, deployment_k)
            for r in relays]


def region_shares(
    circuits: Sequence[Circuit], vias: Sequence[tuple], relays: Sequence[RelayDescriptor]
) -> dict[str, tuple[float, float]]:
    """Per region: fraction of circuits touching any relay there (Tor, with vias)."""
    region_of = {r.id: r.region for r in relays}
    tor: dict[str, int] = defaultdict(int)
    sht: dict[str, int] = defaultdict(int)
    for c, (v1, v2) in zip(circuits, vias):
        base = {region_of[r] for r in c.relays}
        full = base | {region_of[v] for v in (v1, v2) if v is not None}
        for g in base:
            tor[g] += 1
        for g in full:
            sht[g] += 1
    m = len(circuits) or 1
    return {g: (tor[g] / m, sht[g] / m) for g in sorted(set(region_of.values()))}


def write_share_csv(rows: Iterable[ShareRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["relay", "region", "tor_share", "shortor_share", "deployment_k"])
        for r in rows:
            w.writerow([r.relay, r.region, repr(float(r.tor_share)), repr(float(r.shortor_share)),
                        "" if r.deployment_k is None else r.deployment_k])


def fixed_selector(mapping: Mapping[tuple[int, int, int], tuple]) -> ViaSelector:
    return lambda c: mapping.get(c.relays, (None, None))
