from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortor.errors import TopologyError
from shortor.topology import (
    LatencyMatrix,
    RelayDescriptor,
    TopologyConfig,
    generate_topology,
    load_latency_csv,
    load_relays_csv,
    save_latency_csv,
    save_relays_csv,
    top_k_by_weight,
    validate_relays,
)


def flat(n=12, **kw):
    base = dict(n_relays=n, intra_region_base_ms=50.0, jitter_fraction=0.0, tiv_probability=0.0)
    base.update(kw)
    return TopologyConfig(**base)


def three_regions(n=30, seed=0, **kw):
    return TopologyConfig(
        n_relays=n,
        regions=[("NA", 0.5), ("EU", 0.3), ("AS", 0.2)],
        intra_region_base_ms=15.0,
        inter_region_base_ms=[[0, 45, 90], [45, 0, 110], [90, 110, 0]],
        seed=seed,
        **kw,
    )


def test_noise_free_single_region_is_exactly_base():
    _, m = generate_topology(flat())
    off = m.oneway[~np.eye(m.n, dtype=bool)]
    assert np.all(off == 50.0)
    assert np.all(np.diag(m.oneway) == 0.0)


def test_same_seed_bit_identical():
    a = generate_topology(three_regions(seed=7))
    b = generate_topology(three_regions(seed=7))
    assert a[0] == b[0]
    assert np.array_equal(a[1].oneway, b[1].oneway)
    c = generate_topology(three_regions(seed=8))
    assert not np.array_equal(a[1].oneway, c[1].oneway)


def test_full_inflation_leaves_no_detour():
    _, m = generate_topology(flat(n=8, tiv_probability=1.0, tiv_inflation_factor=3.0))
    ow = m.oneway
    n = m.n
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            assert ow[i, j] == 150.0
            for v in range(n):
                if v not in (i, j):
                    assert ow[i, v] + ow[v, j] >= ow[i, j]


def test_rejects_small_networks_and_bad_fractions():
    with pytest.raises(TopologyError):
        generate_topology(flat(n=3))
    with pytest.raises(TopologyError):
        generate_topology(TopologyConfig(n_relays=10, regions=[("A", 0.5), ("B", 0.4)],
                                         inter_region_base_ms=[[0, 1], [1, 0]]))


def test_weights_heavy_tailed_and_flags_present():
    relays, _ = generate_topology(three_regions(n=400, seed=3))
    w = np.array([r.weight for r in relays])
    assert w.min() >= 1.0
    assert np.median(w) < w.mean()
    validate_relays(relays)
    regions = {r.region for r in relays}
    assert regions == {"NA", "EU", "AS"}
    assert sum(r.region == "NA" for r in relays) == 200


def test_guard_and_exit_fallback():
    relays, _ = generate_topology(flat(n=6, guard_fraction=0.0, exit_fraction=0.0))
    assert sum(r.guard_flag for r in relays) == 1
    assert sum(r.exit_flag for r in relays) == 1


def test_triangle_respecting_when_noise_free():
    _, m = generate_topology(flat(n=10))
    ow = m.oneway
    lhs = ow[:, :, None] + ow[None, :, :]  # i->v->j
    assert np.all(lhs.transpose(0, 2, 1) >= ow[:, :, None] - 1e-12)


def test_matrix_invariants():
    with pytest.raises(TopologyError):
        LatencyMatrix([[0, -1], [1, 0]])
    m = LatencyMatrix([[5, 1], [2, 7]])
    assert m.get(0, 0) == 0.0
    assert m.rtt(0, 1) == 3.0
    assert not m.is_symmetric()
    missing = LatencyMatrix.missing(3)
    assert not missing.has(0, 1) and missing.get(0, 1) is None
    assert missing.rtt(0, 1) is None
    with pytest.raises(ValueError):
        m.oneway[0, 1] = 9.0


def test_rtt_form_is_split(tmp_path):
    p = tmp_path / "lat.csv"
    p.write_text("src,dst,rtt_ms\n0,1,100\n")
    _, m = load_latency_csv(p)
    assert m.get(0, 1) == 50.0 and m.get(1, 0) == 50.0


def test_directed_form_read_as_is(tmp_path):
    p = tmp_path / "lat.csv"
    p.write_text("src,dst,fwd_ms,rev_ms\n0,1,40,60\n")
    _, m = load_latency_csv(p)
    assert m.get(0, 1) == 40.0 and m.get(1, 0) == 60.0


def test_empty_pair_list_is_all_missing(tmp_path):
    p = tmp_path / "lat.csv"
    p.write_text("src,dst,rtt_ms\n")
    relays, m = load_latency_csv(p, n_relays=5)
    assert len(relays) == 5
    off = m.oneway[~np.eye(5, dtype=bool)]
    assert np.all(np.isnan(off))


@pytest.mark.parametrize(
    "body, needle",
    [
        ("0,1,100\n0,x,3\n", ":3:"),
        ("0,1,100\n1,0,100\n", "duplicate"),
        ("0,1,-4\n", "negative"),
        ("0,1\n", ":2:"),
    ],
)
def test_malformed_rows_name_the_line(tmp_path, body, needle):
    p = tmp_path / "lat.csv"
    p.write_text("src,dst,rtt_ms\n" + body)
    with pytest.raises(TopologyError, match=needle):
        load_latency_csv(p)


def test_round_trip(tmp_path):
    relays, m = generate_topology(three_regions(n=25, seed=4, family_size=2,
                                                support_fraction=0.6))
    m = m.with_entries([(0, 1, math.nan), (3, 4, math.nan), (4, 3, math.nan)])
    save_relays_csv(relays, tmp_path / "relays.csv")
    save_latency_csv(m, tmp_path / "lat.csv")
    relays2, m2 = load_latency_csv(tmp_path / "lat.csv", tmp_path / "relays.csv")
    assert relays2 == relays
    assert m2 == m
    assert np.array_equal(m2.oneway, m.oneway, equal_nan=True)
    assert load_relays_csv(tmp_path / "relays.csv") == relays


def test_descriptor_validation():
    with pytest.raises(ValueError):
        RelayDescriptor(0, -1.0, True, True, "A")
    with pytest.raises(ValueError):
        RelayDescriptor(0, 1.0, True, True, "A", via_capacity=-1)


def test_top_k_ties_break_by_id():
    relays = [RelayDescriptor(i, w, True, True, "A") for i, w in enumerate([1, 3, 3, 2])]
    assert top_k_by_weight(relays, 2) == {1, 2}
    assert top_k_by_weight(relays, 3) == {1, 2, 3}
    assert top_k_by_weight(relays, 0) == frozenset()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(4, 40),
       tiv=st.floats(0, 1), jitter=st.floats(0, 1))
def test_generated_matrix_invariants(seed, n, tiv, jitter):
    relays, m = generate_topology(three_regions(n=n, seed=seed, tiv_probability=tiv,
                                                jitter_fraction=jitter))
    assert [r.id for r in relays] == list(range(n))
    assert np.all(np.diag(m.oneway) == 0)
    assert np.all(m.oneway >= 0)
    validate_relays(relays)
