from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortor.latency_tables import (
    LatencyConfig,
    LatencyState,
    NextHopTable,
    RttTable,
    latencies_update,
    measure_rtt_table,
    table_gossip_cost,
)
from shortor.topology import LatencyMatrix, RelayDescriptor

A, B, V, W = 0, 1, 2, 3


def tables(rtts: dict[tuple[int, int], float], n: int) -> dict[int, RttTable]:
    out = {i: RttTable(i) for i in range(n)}
    for (a, b), r in rtts.items():
        out[a].rtts[b] = r
        out[b].rtts[a] = r
    return out


def test_single_shortcut_found():
    t = tables({(A, B): 100, (A, V): 20, (V, B): 20}, 3)
    nh = latencies_update(A, t)
    assert nh.entries[B] == [(V, 40)]
    assert nh.vias(B) == [V]


def test_no_speedup_is_pruned():
    t = tables({(A, B): 100, (A, V): 60, (V, B): 60}, 3)
    assert latencies_update(A, t).vias(B) == []


def test_ell_truncates():
    t = tables({(A, B): 100, (A, V): 20, (V, B): 20, (A, W): 25, (W, B): 25}, 4)
    nh = latencies_update(A, t, cfg=LatencyConfig(ell=1))
    assert nh.entries[B] == [(V, 40)]


def test_unknown_destination_is_empty():
    state = LatencyState()
    assert state.vias_for(0, 9) == []
    state.set_rtts(tables({(A, B): 100, (A, V): 20, (V, B): 20}, 3))
    state.refresh()
    assert state.vias_for(A, 7) == []
    assert state.vias_for(A, B) == [V]
    assert state.vias_for(A, B, keep=lambda v: v != V) == []


def test_offline_destination_keeps_stale_faster_entries():
    t = tables({(A, B): 100, (A, V): 20, (V, B): 20}, 3)
    prev = latencies_update(A, t)
    # direct got faster than the stale estimate
    t[A].rtts[B] = 35.0
    assert latencies_update(A, t, prev, online=lambda d: d != B).vias(B) == []
    t[A].rtts[B] = 90.0
    assert latencies_update(A, t, prev, online=lambda d: d != B).entries[B] == [(V, 40)]


def test_rebuild_drops_entries_no_longer_faster():
    t = tables({(A, B): 100, (A, V): 20, (V, B): 20}, 3)
    prev = latencies_update(A, t)
    t[V].rtts[B] = t[B].rtts[V] = 95.0
    assert latencies_update(A, t, prev).vias(B) == []


def test_ties_broken_by_lower_id():
    t = tables({(A, B): 100, (A, 3): 20, (3, B): 20, (A, 2): 20, (2, B): 20}, 4)
    assert latencies_update(A, t).vias(B) == [2, 3]


def test_measure_uses_minimum_sample(rng):
    m = LatencyMatrix([[0, 10, 5], [10, 0, 5], [5, 5, 0]])
    t = measure_rtt_table(0, m, range(3), LatencyConfig(ping_samples=50), rng, noise_ms=3.0)
    assert t.rtts[0] == 0.0
    assert 20.0 <= t.rtts[1] < 20.5
    exact = measure_rtt_table(0, m, range(3))
    assert exact.rtts == {0: 0.0, 1: 20.0, 2: 10.0}


def test_build_skips_missing_and_non_supporting():
    ow = np.full((4, 4), 10.0)
    np.fill_diagonal(ow, 0)
    ow[0, 1] = np.nan
    relays = [RelayDescriptor(i, 1, True, True, "A", supports_shortor=i != 3) for i in range(4)]
    state = LatencyState.build(relays, LatencyMatrix(ow))
    assert set(state.rtt) == {0, 1, 2}
    assert 1 not in state.rtt[0].rtts and 3 not in state.rtt[0].rtts


def test_gossip_cost():
    c = table_gossip_cost(7000, 16)
    assert c.per_relay_table_bytes == 14_000
    assert c.network_table_bytes == 98_000_000
    assert table_gossip_cost(1000, 16).network_table_bytes == 2_000_000
    assert table_gossip_cost(1, 16).exchanged_bytes == 0
    with pytest.raises(ValueError):
        table_gossip_cost(0)


def test_config_validation():
    with pytest.raises(ValueError):
        LatencyConfig(ell=0)
    with pytest.raises(ValueError):
        LatencyConfig(ping_samples=0)


@st.composite
def rtt_instances(draw):
    n = draw(st.integers(3, 12))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    r = rng.integers(1, 60, size=(n, n)).astype(float)
    r[rng.random((n, n)) < 0.15] = np.nan
    return n, r


@settings(max_examples=60, deadline=None)
@given(inst=rtt_instances(), ell=st.integers(1, 6))
def test_properties(inst, ell):
    n, r = inst
    t = {i: RttTable(i, {j: float(r[i, j]) for j in range(n) if j != i and not np.isnan(r[i, j])})
         for i in range(n)}
    for owner in range(n):
        small = latencies_update(owner, t, cfg=LatencyConfig(ell=ell))
        big = latencies_update(owner, t, cfg=LatencyConfig(ell=ell + 2))
        for dst, lst in small.entries.items():
            assert len(lst) <= ell
            assert [e for e, _ in lst] == [e for e, _ in big.entries[dst][:len(lst)]]
            for v, est in lst:
                assert v not in (owner, dst)
                assert est < t[owner].rtts[dst]
            ests = [(est, v) for v, est in lst]
            assert ests == sorted(ests)


def test_nexthop_table_defaults():
    assert NextHopTable(3).vias(1) == []
