"""Pair and circuit speedups, incremental deployment, overhead and Ting.

Round trips through a via ``v`` are composed as ``rtt(i, v) + rtt(v, j) +
2 * forward(v)``: the same via carries both directions and forwards the
cell once each way. Missing measurements never produce a speedup.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from shortor.errors import NoRoute
from shortor.pathsel import Circuit
from shortor.simnet import Cell, CellCmd, QueueClass, Simulator
from shortor.topology import LatencyMatrix, RelayDescriptor, top_k_by_weight

PERCENTILES = (50.0, 90.0, 99.0, 99.9)
DEFAULT_CUTOFFS = (0.0, 10.0, 25.0, 50.0, 100.0)


def _forward_array(forward_delay_ms, n: int) -> np.ndarray:
    if np.isscalar(forward_delay_ms):
        return np.full(n, float(forward_delay_ms))
    arr = np.asarray(forward_delay_ms, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"forward delays must have length {n}")
    return arr


def nearest_rank(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile; NaN for an empty sample."""
    if len(values) == 0:
        return math.nan
    s = np.sort(np.asarray(values, dtype=float))
    rank = max(1, math.ceil(p / 100.0 * len(s)))
    return float(s[min(rank, len(s)) - 1])


class ViaOracle:
    """Cached composed-RTT lookups restricted to a support set."""

    def __init__(self, matrix: LatencyMatrix, support: Iterable[int], forward_delay_ms=1.0):
        n = matrix.n
        self.n = n
        self.rtt = matrix.rtt_array()
        self.fwd = _forward_array(forward_delay_ms, n)
        self.support = np.zeros(n, dtype=bool)
        for s in support:
            self.support[s] = True
        safe = np.where(np.isnan(self.rtt), np.inf, self.rtt)
        # vias outside the support set are never eligible
        self._safe = np.where(self.support[None, :], safe, np.inf)
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def direct(self, i: int, j: int) -> float | None:
        v = self.rtt[i, j]
        return None if math.isnan(v) else float(v)

    def via_totals(self, i: int, j: int) -> np.ndarray:
        tot = self._safe[i, :] + self._safe[:, j] + 2.0 * self.fwd
        tot[i] = np.inf
        tot[j] = np.inf
        return tot

    def faster(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Vias strictly faster than direct, sorted by (rtt, id)."""
        key = (i, j)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        d = self.rtt[i, j]
        if math.isnan(d) or not (self.support[i] and self.support[j]):
            out = (np.empty(0, dtype=int), np.empty(0))
        else:
            tot = self.via_totals(i, j)
            idx = np.nonzero(tot < d)[0]
            order = np.lexsort((idx, tot[idx]))
            idx = idx[order]
            out = (idx, tot[idx])
        self._cache[key] = out
        return out


# ---------------------------------------------------------------- pairs


@dataclass(frozen=True)
class PairSpeedup:
    src: int
    dst: int
    direct_rtt: float | None
    shortor_rtt: float | None
    speedup: float
    best_via: int | None


def pair_speedups(
    matrix: LatencyMatrix,
    support: Iterable[int] | None = None,
    forward_delay_ms=1.0,
) -> list[PairSpeedup]:
    """Best single-via RTT for every ordered pair inside the support set."""
    n = matrix.n
    members = sorted(range(n) if support is None else set(support))
    oracle = ViaOracle(matrix, members, forward_delay_ms)
    out = []
    for i in members:
        row = oracle._safe[i, :]
        # totals[v, j] = rtt(i, v) + rtt(v, j) + 2 f(v)
        totals = row[:, None] + oracle._safe + 2.0 * oracle.fwd[:, None]
        totals[i, :] = np.inf
        np.fill_diagonal(totals, np.inf)
        best_v = np.argmin(totals, axis=0)
        best_t = totals[best_v, np.arange(n)]
        for j in members:
            if j == i:
                continue
            d = oracle.direct(i, j)
            if d is None:
                out.append(PairSpeedup(i, j, None, None, 0.0, None))
                continue
            t = float(best_t[j])
            if t < d:
                out.append(PairSpeedup(i, j, d, t, d - t, int(best_v[j])))
            else:
                out.append(PairSpeedup(i, j, d, d, 0.0, None))
    return out


# ------------------------------------------------------------- circuits


@dataclass(frozen=True)
class CircuitSpeedup:
    circ: int
    leg_speedups: tuple[float, float]
    vias: tuple[int | None, int | None]

    @property
    def total(self) -> float:
        return self.leg_speedups[0] + self.leg_speedups[1]


def _leg_options(oracle: ViaOracle, i: int, j: int, blocked: set[int], cutoff: float,
                 families=None, circuit_fams: set | None = None, k: int = 2):
    d = oracle.direct(i, j)
    if d is None:
        return []
    vias, tots = oracle.faster(i, j)
    picked = []
    for v, t in zip(vias, tots):
        v = int(v)
        gain = d - float(t)
        if gain <= cutoff:
            break
        if v in blocked:
            continue
        if families is not None and families[v] is not None and families[v] in circuit_fams:
            continue
        picked.append((v, gain))
        if len(picked) == k:
            break
    return picked


def assign_circuit(
    oracle: ViaOracle,
    circuit: Circuit,
    cutoff: float = 0.0,
    families: Sequence[str | None] | None = None,
) -> tuple[tuple[int | None, int | None], tuple[float, float]]:
    """Vias for both legs, maximizing total gain with distinct vias.

    Ties in total gain prefer assigning more legs, then the earlier option.
    """
    g, m, e = circuit.relays
    blocked = {g, m, e}
    fams = None
    if families is not None:
        fams = {families[x] for x in blocked if families[x] is not None}
    a = _leg_options(oracle, g, m, blocked, cutoff, families, fams)
    b = _leg_options(oracle, m, e, blocked, cutoff, families, fams)
    best = ((None, None), (0.0, 0.0), 0.0, 0)
    options = [((None, None), (0.0, 0.0))]
    options += [((v, None), (x, 0.0)) for v, x in a[:1]]
    options += [((None, w), (0.0, y)) for w, y in b[:1]]
    options += [((v, w), (x, y)) for v, x in a for w, y in b if v != w]
    for vias, gains in options:
        total = gains[0] + gains[1]
        legs = (vias[0] is not None) + (vias[1] is not None)
        if total > best[2] or (total == best[2] and legs > best[3]):
            best = (vias, gains, total, legs)
    return best[0], best[1]


def circuit_speedups(
    circuits: Sequence[Circuit],
    matrix: LatencyMatrix,
    support: Iterable[int] | None = None,
    cutoff: float = 0.0,
    forward_delay_ms=1.0,
    relays: Sequence[RelayDescriptor] | None = None,
    oracle: ViaOracle | None = None,
) -> list[CircuitSpeedup]:
    if oracle is None:
        members = range(matrix.n) if support is None else support
        oracle = ViaOracle(matrix, members, forward_delay_ms)
    families = None if relays is None else [r.family for r in relays]
    out = []
    for k, c in enumerate(circuits):
        vias, gains = assign_circuit(oracle, c, cutoff, families)
        out.append(CircuitSpeedup(k, gains, vias))
    return out


def percentile_table(values: Sequence[float], ps: Sequence[float] = PERCENTILES) -> dict:
    return {p: nearest_rank(values, p) for p in ps}


@dataclass(frozen=True)
class DeploymentRow:
    k: int
    percentiles: dict
    n_circuits: int


def incremental_deployment(
    circuits: Sequence[Circuit],
    matrix: LatencyMatrix,
    relays: Sequence[RelayDescriptor],
    ks: Sequence[int],
    cutoff: float = 0.0,
    forward_delay_ms=1.0,
) -> list[DeploymentRow]:
    """Circuit speedup percentiles when only the top-k relays by weight participate."""
    rows = []
    for k in ks:
        if k > len(relays):
            raise ValueError(f"k={k} exceeds relay count {len(relays)}")
        support = top_k_by_weight(relays, k)
        res = circuit_speedups(circuits, matrix, support, cutoff, forward_delay_ms, relays)
        rows.append(DeploymentRow(k, percentile_table([r.total for r in res]), len(res)))
    return rows


@dataclass(frozen=True)
class OverheadReport:
    cutoff_ms: float
    via_transits: int
    overhead_fraction: float


def overhead_from_assignments(cutoff: float, results: Sequence[CircuitSpeedup]) -> OverheadReport:
    legs = sum((r.vias[0] is not None) + (r.vias[1] is not None) for r in results)
    frac = legs / (3 * len(results)) if results else 0.0
    return OverheadReport(float(cutoff), legs, frac)


def overhead(
    circuits: Sequence[Circuit],
    matrix: LatencyMatrix,
    support: Iterable[int] | None = None,
    cutoffs: Sequence[float] = DEFAULT_CUTOFFS,
    forward_delay_ms=1.0,
    relays: Sequence[RelayDescriptor] | None = None,
) -> list[OverheadReport]:
    """Extra relay transits from via-routed legs, relative to three per circuit."""
    members = range(matrix.n) if support is None else support
    oracle = ViaOracle(matrix, members, forward_delay_ms)
    return [
        overhead_from_assignments(c, circuit_speedups(circuits, matrix, cutoff=c, relays=relays,
                                                      oracle=oracle))
        for c in cutoffs
    ]


# ------------------------------------------------------------------ Ting


@dataclass(frozen=True)
class TingResult:
    estimate_ms: float
    rtt_ab: float
    rtt_a: float
    rtt_b: float
    asymmetry: float


def _circuit_rtt(sim_args: dict, path: Sequence[int], samples: int) -> tuple[float, float, float]:
    """Min RTT over ``samples`` round trips along ``path`` (observer at both ends).

    Also returns the outbound and return halves of the fastest sample,
    split at the turnaround relay.
    """
    matrix: LatencyMatrix = sim_args["matrix"]
    for a, b in zip(path, path[1:]):
        if not matrix.has(a, b):
            raise NoRoute(f"NO_ROUTE: missing link {a}->{b}")
    mid = len(path) // 2
    best = (math.inf, 0.0, 0.0)
    for _ in range(samples):
        sim = Simulator(matrix, sim_args["forward"], sim_args["service"], record_trace=False)
        marks: dict[str, float] = {}

        def handler(src: int, dst: int, cell: Cell, sim=sim, marks=marks) -> None:
            hop = cell.seq + 1
            if hop == len(path) - 1:
                marks["end"] = sim.now
                return
            if hop == mid:
                # the far observer turns the probe around without a relay hop
                marks["mid"] = sim.now
                sim.schedule_send(dst, path[hop + 1], Cell(CellCmd.PING, 0, seq=hop))
                return
            sim.enqueue(dst, Cell(CellCmd.RELAY, 0, seq=hop), QueueClass.CIRCUIT,
                        next_hop=path[hop + 1])

        sim.handler = handler
        sim.schedule_send(path[0], path[1], Cell(CellCmd.RELAY, 0, seq=0))
        sim.run_until_quiescent()
        total = marks["end"]
        if total < best[0]:
            best = (total, marks["mid"], total - marks["mid"])
    return best


def ting_estimate(
    obs1: int,
    obs2: int,
    a: int,
    b: int,
    matrix: LatencyMatrix,
    forward_delay_ms=1.0,
    service_ms: float = 0.0,
    samples: int = 10,
) -> TingResult:
    """Estimate rtt(a, b) as ``rtt_ab - (rtt_a + rtt_b) / 2`` from three probe circuits.

    The outbound probe of each circuit crosses the relays from ``obs1`` to
    ``obs2`` and returns the same way. The observer-leg terms cancel
    exactly when ``obs1`` and ``obs2`` are co-located.
    """
    args = {"matrix": matrix, "forward": forward_delay_ms, "service": service_ms}
    ab, h1, h2 = _circuit_rtt(args, [obs1, a, b, obs2, b, a, obs1], samples)
    ra, _, _ = _circuit_rtt(args, [obs1, a, obs2, a, obs1], samples)
    rb, _, _ = _circuit_rtt(args, [obs1, b, obs2, b, obs1], samples)
    lo, hi = min(h1, h2), max(h1, h2)
    # halves accumulate the same terms in opposite order; ignore rounding noise
    if math.isclose(lo, hi, rel_tol=1e-12, abs_tol=1e-9):
        asym = 0.0
    else:
        asym = hi / lo - 1.0 if lo > 0 else math.inf
    return TingResult(ab - 0.5 * (ra + rb), ab, ra, rb, asym)


def with_colocated_observers(matrix: LatencyMatrix, host: int) -> tuple[LatencyMatrix, int, int]:
    """Append two observers sharing ``host``'s latencies; returns (matrix, obs1, obs2)."""
    n = matrix.n
    ow = np.zeros((n + 2, n + 2))
    ow[:n, :n] = matrix.oneway
    for o in (n, n + 1):
        ow[o, :n] = matrix.oneway[host, :]
        ow[:n, o] = matrix.oneway[:, host]
    return LatencyMatrix(ow), n, n + 1


def median_asymmetry(matrix: LatencyMatrix, pairs: Iterable[tuple[int, int]]) -> float:
    """Median of ``max/min - 1`` over the two one-way delays of each pair."""
    vals = []
    for i, j in pairs:
        x, y = matrix.get(i, j), matrix.get(j, i)
        if x is None or y is None:
            continue
        lo, hi = min(x, y), max(x, y)
        vals.append(0.0 if hi == lo else (hi / lo - 1.0 if lo > 0 else math.inf))
    return float(np.median(vals)) if vals else math.nan


# --------------------------------------------------------------- writers


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def write_pairs_csv(pairs: Iterable[PairSpeedup], path: str | Path) -> None:
    write_rows(path, ["src", "dst", "direct_ms", "shortor_ms", "speedup_ms", "best_via"],
               [(p.src, p.dst, p.direct_rtt, p.shortor_rtt, float(p.speedup), p.best_via)
                for p in pairs])


def write_circuits_csv(results: Iterable[CircuitSpeedup], path: str | Path) -> None:
    write_rows(path, ["circ", "leg1_speedup", "leg2_speedup", "total"],
               [(r.circ, float(r.leg_speedups[0]), float(r.leg_speedups[1]), float(r.total))
                for r in results])


def write_overhead_csv(reports: Iterable[OverheadReport], path: str | Path) -> None:
    write_rows(path, ["cutoff_ms", "via_legs", "overhead_fraction"],
               [(r.cutoff_ms, r.via_transits, float(r.overhead_fraction)) for r in reports])


def write_percentiles_csv(rows: Iterable[DeploymentRow], path: str | Path) -> None:
    write_rows(path, ["k", "p50", "p90", "p99", "p999"],
               [(r.k, *[float(r.percentiles[p]) for p in PERCENTILES]) for r in rows])


def support_from_rule(relays: Sequence[RelayDescriptor], rule: str | Mapping | None) -> frozenset:
    """``ALL``, ``SUPPORTS`` (the descriptor flag), ``{"top_k": k}`` or ``{"list": [...]}``."""
    if rule is None or rule == "ALL":
        return frozenset(r.id for r in relays)
    if rule == "SUPPORTS":
        return frozenset(r.id for r in relays if r.supports_shortor)
    if isinstance(rule, Mapping):
        if "top_k" in rule:
            return top_k_by_weight(relays, int(rule["top_k"]))
        if "list" in rule:
            return frozenset(int(x) for x in rule["list"])
    raise ValueError(f"unknown support rule {rule!r}")
