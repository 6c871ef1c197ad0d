"""One test per acceptance criterion; the terminal summary prints a PASS/FAIL line for each."""

from __future__ import annotations

import dataclasses
import json
import time

import numpy as np
import pytest

from conftest import full_relays, planted_oneway
from shortor import anonymity as anon
from shortor import evaluation as ev
from shortor.cli import main
from shortor.errors import NoRoute
from shortor.latency_tables import LatencyConfig, RttTable, latencies_update
from shortor.overlay import FWD, REV, ChurnEvent, OverlayConfig, OverlaySim
from shortor.pathsel import Circuit, PathMode, PathSelConfig, enumerate_circuits, sample_circuits
from shortor.race import race_run
from shortor.topology import LatencyMatrix, RelayDescriptor, TopologyConfig, generate_topology

REGIONS = [("NA", 0.5), ("EU", 0.3), ("AS", 0.2)]
INTER = [[0.0, 45.0, 90.0], [45.0, 0.0, 110.0], [90.0, 110.0, 0.0]]


def three_regions(n, seed, **kw):
    cfg = TopologyConfig(n_relays=n, regions=REGIONS, intra_region_base_ms=15.0,
                         inter_region_base_ms=INTER, seed=seed, **kw)
    return generate_topology(cfg)


# ------------------------------------------------------------------ 1


def race_oracle(ow, fwd, s, d, cands):
    """Analytic first arrival: direct wins ties, then the lowest via id."""
    best = (ow[s, d], -1, None) if np.isfinite(ow[s, d]) else None
    for v in sorted(set(cands)):
        t = ow[s, v] + fwd[v] + ow[v, d]
        if np.isfinite(t) and (best is None or (t, v) < best[:2]):
            best = (t, v, v)
    return best


def test_c01_race_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(3, 51))
        ow = rng.integers(1, 60, size=(n, n)).astype(float)
        ow[rng.random((n, n)) < 0.05] = np.nan
        np.fill_diagonal(ow, 0.0)
        fwd = rng.integers(0, 3, size=n).astype(float)
        s, d = (int(x) for x in rng.choice(n, size=2, replace=False))
        others = [v for v in range(n) if v not in (s, d)]
        cands = [int(v) for v in rng.permutation(others)[: int(rng.integers(0, len(others) + 1))]]
        want = race_oracle(ow, fwd, s, d, cands)
        if want is None:
            with pytest.raises(NoRoute):
                race_run(LatencyMatrix(ow), s, d, 0, cands, forward_delay_ms=fwd)
            continue
        out = race_run(LatencyMatrix(ow), s, d, 0, cands, forward_delay_ms=fwd)
        mismatches += out.winner != want[2]
    elapsed = time.perf_counter() - start
    assert mismatches == 0
    assert elapsed < 10.0, elapsed


# ------------------------------------------------------------------ 2


def brute_top_ell(R, owner, ell):
    """Every destination's top-ell (via, est) by (est, via), strictly faster than direct."""
    n = len(R)
    est = R[owner][None, :] + R  # est[d, v] = R[owner, v] + R[d, v]
    est[:, owner] = np.inf
    np.fill_diagonal(est, np.inf)
    out = {}
    for d in range(n):
        if d == owner or not np.isfinite(R[owner, d]):
            continue
        ok = np.flatnonzero(est[d] < R[owner, d])
        order = ok[np.lexsort((ok, est[d, ok]))][:ell]
        if len(order):
            out[d] = [(int(v), float(est[d, v])) for v in order]
    return out


def test_c02_nexthop_oracle_equivalence():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(3, 101))
        ell = int(rng.integers(1, 8))
        R = rng.integers(1, 200, size=(n, n)).astype(float)
        R[rng.random((n, n)) < 0.1] = np.inf
        np.fill_diagonal(R, 0.0)
        tables = {i: RttTable(i, {j: float(R[i, j]) for j in range(n) if np.isfinite(R[i, j])})
                  for i in range(n)}
        owner = int(rng.integers(n))
        got = latencies_update(owner, tables, cfg=LatencyConfig(ell=ell)).entries
        assert got == brute_top_ell(R, owner, ell)
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, elapsed


# ------------------------------------------------------------------ 3


def test_c03_lemma1_exhaustive():
    start = time.perf_counter()
    rep = anon.verify_lemma1(8)
    elapsed = time.perf_counter() - start
    # 336 circuits x 31 via placements x 2^8 corruption sets
    assert rep.checked == 336 * 31 * 256
    assert rep.counterexamples == []
    assert elapsed < 60.0, elapsed


# ------------------------------------------------------------------ 4


def test_c04_claim2_containment():
    exhaustive = anon.verify_claim2(anon.all_placements(6))
    assert exhaustive.checked > 0 and exhaustive.counterexamples == []
    rng = np.random.default_rng(404)
    sampled = anon.verify_claim2(anon.random_placements(30, 10_000, rng))
    assert sampled.checked == 10_000 and sampled.counterexamples == []


# ------------------------------------------------------------------ 5


def test_c05_claim3_region_independence():
    cfg = TopologyConfig(n_relays=8, regions=REGIONS, intra_region_base_ms=15.0,
                         inter_region_base_ms=INTER, tiv_probability=0.3, seed=55)
    relays, matrix = generate_topology(cfg)
    oracle = ev.ViaOracle(matrix, range(matrix.n), 1.0)
    families = [r.family for r in relays]
    table = {c.relays: ev.assign_circuit(oracle, c, 0.0, families)[0]
             for c in enumerate_circuits(relays)}
    assert any(v != (None, None) for v in table.values()), "selector never uses a via"
    selector = anon.fixed_selector(table)
    regions = [name for name, _ in REGIONS]
    dist = cfg.region_distances()
    weighted = anon.compare_regions(relays, PathSelConfig(region_distance=dist), regions,
                                    selector)
    assert weighted.compared > 0 and weighted.max_difference <= 1e-9
    biased_cfg = PathSelConfig(PathMode.LOCATION_BIASED, 2.0, region_distance=dist)
    biased = anon.compare_regions(relays, biased_cfg, regions, selector)
    assert biased.max_difference > 1e-3


# ------------------------------------------------------------------ 6


def test_c06_loop_freedom_and_transparency():
    relays, matrix = three_regions(40, 11, tiv_probability=0.2, via_capacity=20)
    circuits = sample_circuits(relays, PathSelConfig(n_circuits=10_000, seed=5))
    rng = np.random.default_rng(1)
    churn = []
    for _ in range(40):
        t0, r = float(rng.uniform(2500, 100_000)), int(rng.integers(40))
        churn += [ChurnEvent(t0, r, 0), ChurnEvent(t0 + float(rng.uniform(500, 5000)), r, 20)]
    cfg = OverlayConfig(ping_mode="analytic", cells_per_circuit=3, churn=churn,
                        record_trace=False)
    sim = OverlaySim(relays, matrix, circuits, cfg, seed=3).run()
    assert len(sim.races) > 0 and sim.failovers, "churn never forced a via failure"
    via_hops = sum(len(p) - 3 for *_, p in sim.delivered_paths)
    assert via_hops > 0
    assert all(len(set(p)) == len(p) for *_, p in sim.delivered_paths)
    assert len(sim.injected) == 2 * len(circuits)
    for key, sent in sim.injected.items():
        assert sim.delivered.get(key) == sent, key
    assert sim.conservation()["balanced"]


# ------------------------------------------------------------------ 7


def test_c07_fallback_equivalence():
    relays, matrix = three_regions(30, 7, tiv_probability=0.3)
    circuits = sample_circuits(relays, PathSelConfig(n_circuits=200, seed=8))
    churn = [ChurnEvent(4000.0, 3, 0), ChurnEvent(6000.0, 3, 100)]
    off = [dataclasses.replace(r, supports_shortor=False) for r in relays]
    a = OverlaySim(off, matrix, circuits, OverlayConfig(churn=churn), seed=9).run()
    b = OverlaySim(relays, matrix, circuits,
                   OverlayConfig(shortor_enabled=False, churn=churn), seed=9).run()
    rows_a = [r.as_row() for r in a.sim.trace]
    rows_b = [r.as_row() for r in b.sim.trace]
    assert rows_a and rows_a == rows_b
    assert not a.races and all(len(p) == 3 for *_, p in a.delivered_paths)


# ------------------------------------------------------------------ 8


def test_c08_planted_shortcut():
    f = 1.0
    sim = OverlaySim(full_relays(4), LatencyMatrix(planted_oneway(150.0, 25.0)),
                     [Circuit(0, 1, 2)],
                     OverlayConfig(forward_delay_ms=f, cells_per_circuit=6, record_legs=True),
                     seed=0).run()
    fwd = {s: (t, v) for s, t, v in sim.leg_times(0, 0, 1, FWD)}
    rev = {s: (t, v) for s, t, v in sim.leg_times(0, 1, 0, REV)}
    steady = [s for s in sorted(fwd) if s in rev and fwd[s][1] == 3 and rev[s][1] == 3]
    assert len(steady) >= 3
    tol = 2 * f + 1.0
    for s in steady:
        leg_rtt = fwd[s][0] + rev[s][0]
        assert abs(leg_rtt - (100.0 + 2 * f)) <= tol, (s, leg_rtt)
    pairs = {(p.src, p.dst): p for p in ev.pair_speedups(sim.matrix, None, f)}
    assert abs(pairs[(0, 1)].speedup - 200.0) <= tol
    assert pairs[(0, 1)].best_via == 3


# ------------------------------------------------------------------ 9


CUTOFFS = [0.0, 10.0, 25.0, 50.0, 100.0]


@pytest.mark.parametrize("seed", range(8))
def test_c09_overhead_properties(seed):
    relays, m = three_regions(40, seed, tiv_probability=0.4, tiv_inflation_factor=5.0)
    circuits = sample_circuits(relays, PathSelConfig(n_circuits=400, seed=seed))
    fr = [r.overhead_fraction for r in ev.overhead(circuits, m, None, CUTOFFS, 1.0, relays)]
    assert fr[0] <= 2 / 3
    assert all(a >= b for a, b in zip(fr, fr[1:])), fr

    # Euclidean latencies obey the triangle inequality, so no via ever helps
    pts = np.random.default_rng(seed).uniform(0, 100, size=(40, 2))
    flat = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    tri = [r.overhead_fraction
           for r in ev.overhead(circuits, LatencyMatrix(flat), None, CUTOFFS, 1.0, relays)]
    assert tri == [0.0] * len(CUTOFFS)


# ------------------------------------------------------------------ 10


def test_c10_heavy_tail_truncation():
    start = time.perf_counter()
    _, m = three_regions(200, 10, tiv_probability=0.2, tiv_inflation_factor=4.0)
    pairs = [p for p in ev.pair_speedups(m, None, 1.0) if p.direct_rtt is not None]
    direct = [p.direct_rtt for p in pairs]
    shortor = [p.shortor_rtt for p in pairs]
    assert ev.nearest_rank(shortor, 99.9) < ev.nearest_rank(direct, 99.9)
    assert max(shortor) <= max(direct)
    assert time.perf_counter() - start < 60.0


# ------------------------------------------------------------------ 11


def test_c11_ting_estimator():
    rng = np.random.default_rng(111)
    for _ in range(100):
        n = int(rng.integers(3, 12))
        ow = rng.uniform(1, 120, size=(n, n))
        ow = np.triu(ow, 1) + np.triu(ow, 1).T
        m = LatencyMatrix(ow)
        a, b, host = (int(x) for x in rng.choice(n, size=3, replace=False))
        m2, o1, o2 = ev.with_colocated_observers(m, host)
        fwd = rng.uniform(0, 5, size=m2.n)
        res = ev.ting_estimate(o1, o2, a, b, m2, forward_delay_ms=fwd, samples=2)
        assert abs(res.estimate_ms - (m.rtt(a, b) + fwd[a] + fwd[b])) <= 1e-6
        assert res.asymmetry == 0.0


# ------------------------------------------------------------------ 12


def test_c12_backoff_stability():
    n, V = 7, 6
    ow = np.full((n, n), 40.0)
    np.fill_diagonal(ow, 0.0)
    for a, b in [(0, 1), (3, 4)]:
        ow[a, b] = ow[b, a] = 150.0
    ow[:V, V] = ow[V, :V] = 25.0
    relays = [RelayDescriptor(i, 1.0, True, True, "R0", via_capacity=1 if i == V else 100)
              for i in range(n)]
    horizon = 50 * 60_000.0
    cfg = OverlayConfig(ping_mode="simulated", cells_per_circuit=3000, cell_interval_ms=1000.0,
                        horizon_ms=horizon, record_trace=False)
    sim = OverlaySim(relays, LatencyMatrix(ow), [Circuit(0, 1, 2), Circuit(3, 4, 5)], cfg,
                     seed=0).run()
    assert sim.backoff_log, "the capacity-1 via was never contended"

    quiet = 10 * cfg.revalidate_ms
    swap_times = [0.0] + sorted(t for t, *_ in sim.swaps)
    stable_from = next((t for t, nxt in zip(swap_times, swap_times[1:] + [horizon])
                        if nxt - t >= quiet and t + quiet <= horizon), None)
    assert stable_from is not None, sim.swaps
    # the quiet stretch must include actual re-races, not just idle time
    assert any(stable_from < t <= stable_from + quiet for t, *_ in sim.race_starts)

    for t_drop, relay, via, eligible_at in sim.backoff_log:
        assert eligible_at > t_drop
        for t, r, _, _, cands in sim.race_starts:
            if r == relay and t_drop <= t < eligible_at:
                assert via not in cands, (t_drop, t, eligible_at, relay, via)


# ------------------------------------------------------------------ 13


SMALL = {
    "seed": 13,
    "topology": {"generator": {"n_relays": 20, "tiv_probability": 0.3}},
    "path_selection": {"n_circuits": 50},
    "simulation": {"cells_per_circuit": 2},
    "anonymity": {"lemma_n": 5, "claim2_n": 5, "claim2_samples": 300, "claim3_n": 5},
    "ting": {"quadruples": 5, "samples": 2},
    "deployment_ks": [0, 5, 10],
}

SUBCOMMANDS = ["gen-topology", "simulate", "eval-pairs", "eval-circuits", "incremental",
               "overhead", "network-share", "anonymity-check", "ting"]


def test_c13_determinism(tmp_path, capsys):
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps(SMALL))
    for cmd in SUBCOMMANDS:
        dirs = [tmp_path / cmd / run for run in ("a", "b")]
        for d in dirs:
            assert main([cmd, "--scenario", str(scenario), "--out", str(d)]) == 0, cmd
        names = sorted(p.name for p in dirs[0].iterdir())
        assert names == sorted(p.name for p in dirs[1].iterdir())
        assert {"manifest.json", "scenario.json", "summary.txt"} <= set(names)
        for name in names:
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), (cmd, name)
    capsys.readouterr()
