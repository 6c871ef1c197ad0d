"""Pairwise RTT tables and top-ell candidate via lists.

Each participating relay keeps an :class:`RttTable` of minimum observed
ping times and a :class:`NextHopTable` listing, per destination, up to
``ell`` vias whose two-leg estimate beats the direct RTT. The second leg's
estimate always comes from the destination's own table.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from shortor.topology import LatencyMatrix, RelayDescriptor

ONE_DAY_MS = 86_400_000.0


@dataclass(frozen=True)
class LatencyConfig:
    ell: int = 5
    update_period_ms: float = ONE_DAY_MS
    ping_samples: int = 10

    def __post_init__(self):
        if self.ell < 1:
            raise ValueError("ell must be >= 1")
        if self.ping_samples < 1:
            raise ValueError("ping_samples must be >= 1")


@dataclass
class RttTable:
    owner: int
    rtts: dict[int, float] = field(default_factory=dict)
    epoch: int = 0

    def __post_init__(self):
        self.rtts.setdefault(self.owner, 0.0)


@dataclass
class NextHopTable:
    owner: int
    entries: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def vias(self, dst: int) -> list[int]:
        return [v for v, _ in self.entries.get(dst, [])]


def rtt_samples(
    matrix: LatencyMatrix,
    a: int,
    b: int,
    samples: int,
    rng: np.random.Generator | None = None,
    noise_ms: float = 0.0,
) -> list[float] | None:
    """Simulated ping round trips ``a -> b -> a``; None if either way is missing."""
    base = matrix.rtt(a, b)
    if base is None:
        return None
    if rng is None or noise_ms <= 0:
        return [base] * samples
    return [base + float(x) for x in rng.exponential(noise_ms, size=samples)]


def measure_rtt_table(
    owner: int,
    matrix: LatencyMatrix,
    responders: Iterable[int],
    cfg: LatencyConfig = LatencyConfig(),
    rng: np.random.Generator | None = None,
    noise_ms: float = 0.0,
    epoch: int = 0,
) -> RttTable:
    """Ping every responder ``ping_samples`` times and keep the minimum."""
    table = RttTable(owner, epoch=epoch)
    for x in responders:
        if x == owner:
            continue
        obs = rtt_samples(matrix, owner, x, cfg.ping_samples, rng, noise_ms)
        if obs is not None:
            table.rtts[x] = min(obs)
    return table


def best_vias(
    owner: int,
    dst: int,
    own: Mapping[int, float],
    theirs: Mapping[int, float],
    ell: int,
) -> list[tuple[int, float]]:
    """Top-``ell`` ``(via, own[via] + theirs[via])`` strictly below ``own[dst]``."""
    direct = own.get(dst)
    if direct is None:
        return []
    found = []
    small, large = (own, theirs) if len(own) <= len(theirs) else (theirs, own)
    for v in small:
        if v == owner or v == dst or v not in large:
            continue
        est = own[v] + theirs[v]
        if est < direct:
            found.append((est, v))
    found.sort()
    return [(v, est) for est, v in found[:ell]]


def latencies_update(
    owner: int,
    tables: Mapping[int, RttTable],
    previous: NextHopTable | None = None,
    cfg: LatencyConfig = LatencyConfig(),
    online: Callable[[int], bool] | None = None,
) -> NextHopTable:
    """Rebuild ``owner``'s candidate lists from freshly measured RTT tables.

    ``tables[owner]`` must already hold this round's estimates. For a
    destination whose table can't be fetched (offline or absent) the old
    list is kept, minus entries no longer faster than the new direct RTT.
    """
    own = tables[owner].rtts
    out = NextHopTable(owner)
    for dst in sorted(own):
        if dst == owner:
            continue
        direct = own[dst]
        reachable = dst in tables and (online is None or online(dst))
        if reachable:
            picked = best_vias(owner, dst, own, tables[dst].rtts, cfg.ell)
        else:
            stale = previous.entries.get(dst, []) if previous is not None else []
            picked = [(v, est) for v, est in stale if est < direct][: cfg.ell]
        if picked:
            out.entries[dst] = picked
    return out


class LatencyState:
    """RTT and NextHop tables for every participating relay."""

    def __init__(self, cfg: LatencyConfig = LatencyConfig()):
        self.cfg = cfg
        self.rtt: dict[int, RttTable] = {}
        self.nexthop: dict[int, NextHopTable] = {}
        self.epoch = 0

    @classmethod
    def build(
        cls,
        relays: Sequence[RelayDescriptor],
        matrix: LatencyMatrix,
        cfg: LatencyConfig = LatencyConfig(),
        rng: np.random.Generator | None = None,
        noise_ms: float = 0.0,
    ) -> "LatencyState":
        state = cls(cfg)
        members = [r.id for r in relays if r.supports_shortor]
        for o in members:
            state.rtt[o] = measure_rtt_table(o, matrix, members, cfg, rng, noise_ms)
        state.refresh()
        return state

    def set_rtts(self, tables: Mapping[int, RttTable]) -> None:
        self.rtt = dict(tables)

    def refresh(self, online: Callable[[int], bool] | None = None) -> None:
        # all RTT tables are measured before any NextHop rebuild
        self.epoch += 1
        self.nexthop = {
            o: latencies_update(o, self.rtt, self.nexthop.get(o), self.cfg, online)
            for o in sorted(self.rtt)
        }

    def vias_for(
        self, owner: int, dst: int, keep: Callable[[int], bool] | None = None
    ) -> list[int]:
        nh = self.nexthop.get(owner)
        if nh is None:
            return []
        vias = nh.vias(dst)
        return vias if keep is None else [v for v in vias if keep(v)]

    def estimate(self, owner: int, dst: int) -> float | None:
        t = self.rtt.get(owner)
        return None if t is None else t.rtts.get(dst)

    def dump_rows(self):
        for o in sorted(self.nexthop):
            for d in sorted(self.nexthop[o].entries):
                for v, est in self.nexthop[o].entries[d]:
                    yield o, d, v, est

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["owner", "dst", "via", "est_rtt_ms"])
            for o, d, v, est in self.dump_rows():
                w.writerow([o, d, v, repr(float(est))])


@dataclass(frozen=True)
class GossipCost:
    per_relay_table_bytes: float
    network_table_bytes: float
    exchanged_bytes: float


def table_gossip_cost(n: int, bits_per_entry: int = 16) -> GossipCost:
    """Bytes of RTT tables per update round.

    Every relay holds ``n`` entries; the network stores ``n`` such tables,
    and each relay fetches the ``n - 1`` tables of its peers.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    per = n * bits_per_entry / 8
    return GossipCost(per, n * per, n * (n - 1) * per)


def race_cost_bytes(circuits: int, legs: int = 2, cells_per_race: int = 5,
                    cell_bytes: int = 512) -> float:
    """Rough race bandwidth: one cell per participant on each raced leg."""
    return float(circuits) * legs * cells_per_race * cell_bytes

