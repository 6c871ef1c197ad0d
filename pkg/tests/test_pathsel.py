from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortor.errors import Exhausted
from shortor.pathsel import (
    Circuit,
    PathMode,
    PathSelConfig,
    circuit_distribution,
    enumerate_circuits,
    is_valid_circuit,
    read_circuits_csv,
    sample_circuit,
    sample_circuits,
    selection_probability,
    write_circuits_csv,
)
from shortor.topology import RelayDescriptor


def equal_relays(n, **kw):
    return [RelayDescriptor(i, 1.0, True, True, "A", **kw) for i in range(n)]


def two_region_relays():
    regions = ["A", "A", "B", "B", "A", "B"]
    weights = [3.0, 1.0, 2.0, 1.0, 1.5, 2.5]
    return [RelayDescriptor(i, w, True, i % 2 == 0 or i == 5, r)
            for i, (w, r) in enumerate(zip(weights, regions))]


def test_two_relays_exhausted(rng):
    with pytest.raises(Exhausted, match="EXHAUSTED"):
        sample_circuit(equal_relays(2), PathSelConfig(), rng)


def test_no_exit_exhausted(rng):
    relays = [RelayDescriptor(i, 1.0, True, False, "A") for i in range(5)]
    with pytest.raises(Exhausted):
        sample_circuit(relays, PathSelConfig(), rng)


def test_equal_weights_uniform_roles():
    n, draws = 5, 100_000
    circuits = sample_circuits(equal_relays(n), PathSelConfig(n_circuits=draws, seed=3))
    p = 1.0 / n
    sigma = np.sqrt(draws * p * (1 - p))
    for role in ("guard", "middle", "exit"):
        counts = np.bincount([getattr(c, role) for c in circuits], minlength=n)
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma), (role, counts)


def test_zero_bias_matches_weighted():
    relays = two_region_relays()
    a = sample_circuits(relays, PathSelConfig(n_circuits=300, seed=9), ["A", "B"])
    b = sample_circuits(relays, PathSelConfig(PathMode.LOCATION_BIASED, 0.0, 300, 9), ["A", "B"])
    assert [c.relays for c in a] == [c.relays for c in b]


def test_weighted_independent_of_client_region():
    relays = two_region_relays()
    cfg = PathSelConfig(n_circuits=200, seed=4)
    a = sample_circuits(relays, cfg, ["A"])
    b = sample_circuits(relays, cfg, ["B"])
    assert [c.relays for c in a] == [c.relays for c in b]
    for c in enumerate_circuits(relays):
        assert selection_probability(relays, cfg, c, "A") == selection_probability(relays, cfg,
                                                                                   c, "B")


def test_biased_selection_depends_on_region():
    relays = two_region_relays()
    cfg = PathSelConfig(PathMode.LOCATION_BIASED, 2.0)
    assert any(
        abs(selection_probability(relays, cfg, c, "A") - selection_probability(relays, cfg, c, "B"))
        > 1e-6
        for c in enumerate_circuits(relays)
    )


def test_four_equal_relays():
    relays = equal_relays(4)
    cfg = PathSelConfig()
    circuits = list(enumerate_circuits(relays))
    assert len(circuits) == 24
    for c in circuits:
        assert selection_probability(relays, cfg, c) == pytest.approx(1 / 24, abs=1e-15)
    assert selection_probability(relays, cfg, Circuit(0, 0, 1)) == 0.0


def test_families_are_disjoint(rng):
    relays = [RelayDescriptor(i, 1.0 + i, True, True, "A", family=f"F{i // 2}") for i in range(8)]
    for c in sample_circuits(relays, PathSelConfig(n_circuits=500, seed=1)):
        assert is_valid_circuit(relays, c)
        assert len({c.guard // 2, c.middle // 2, c.exit // 2}) == 3


def test_csv_round_trip(tmp_path):
    circuits = [Circuit(0, 1, 2, "A"), Circuit(3, 1, 0, "B")]
    write_circuits_csv(circuits, tmp_path / "c.csv")
    assert read_circuits_csv(tmp_path / "c.csv") == circuits


@st.composite
def populations(draw):
    n = draw(st.integers(3, 8))
    relays = []
    for i in range(n):
        relays.append(RelayDescriptor(
            i,
            draw(st.floats(0.1, 10.0)),
            draw(st.booleans()) or i == 0,
            draw(st.booleans()) or i == 1,
            draw(st.sampled_from(["A", "B"])),
            family=draw(st.sampled_from([None, None, "x", "y"])),
        ))
    return relays


@settings(max_examples=60, deadline=None)
@given(relays=populations(), bias=st.floats(0, 3), region=st.sampled_from(["A", "B"]))
def test_probabilities_sum_to_one(relays, bias, region):
    cfg = PathSelConfig(PathMode.LOCATION_BIASED, bias)
    dist = circuit_distribution(relays, cfg, region)
    if dist:
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(relays=populations(), seed=st.integers(0, 1000))
def test_samples_have_positive_probability(relays, seed):
    dist = circuit_distribution(relays, PathSelConfig())
    if not dist:
        return
    rng = np.random.default_rng(seed)
    for _ in range(30):
        c = sample_circuit(relays, PathSelConfig(), rng)
        assert dist.get(c.relays, 0.0) > 0
