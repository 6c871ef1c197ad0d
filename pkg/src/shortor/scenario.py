"""Scenario files: one JSON or YAML document that fully determines a run."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from shortor.latency_tables import LatencyConfig
from shortor.overlay import ChurnEvent, OverlayConfig
from shortor.pathsel import PathMode, PathSelConfig
from shortor.race import BackoffConfig
from shortor.topology import (
    LatencyMatrix,
    RelayDescriptor,
    TopologyConfig,
    generate_topology,
    load_latency_csv,
)


@dataclass
class GeneratorSpec:
    n_relays: int = 50
    regions: list = field(default_factory=lambda: [["NA", 0.5], ["EU", 0.3], ["AS", 0.2]])
    intra_region_base_ms: float = 15.0
    inter_region_base_ms: list = field(
        default_factory=lambda: [[0.0, 45.0, 90.0], [45.0, 0.0, 110.0], [90.0, 110.0, 0.0]]
    )
    jitter_fraction: float = 0.2
    tiv_probability: float = 0.1
    tiv_inflation_factor: float = 3.0
    seed: int | None = None
    guard_fraction: float = 0.5
    exit_fraction: float = 0.3
    support_fraction: float = 1.0
    via_capacity: int = 100
    family_size: int = 1


@dataclass
class TopologySpec:
    generator: GeneratorSpec | None = field(default_factory=GeneratorSpec)
    latency_csv: str | None = None
    relays_csv: str | None = None


@dataclass
class RaceSpec:
    backoff_base_ms: float = 1000.0
    max_exponent: int = 8
    race_window_ms: float = 30_000.0
    via_timeout_factor: float = 3.0
    revalidate_ms: float = 60_000.0
    stream_idle_ms: float = 30_000.0


@dataclass
class SimulationSpec:
    shortor_enabled: bool = True
    forward_delay_ms: float = 1.0
    service_ms: float = 0.1
    ping_mode: str = "simulated"
    ping_interval_ms: float = 100.0
    table_update_ms: float = 2000.0
    traffic_start_ms: float = 2500.0
    cells_per_circuit: int = 5
    cell_interval_ms: float = 1000.0
    circuit_stagger_ms: float = 10.0
    echo: bool = True
    horizon_ms: float | None = None
    churn: list = field(default_factory=list)
    record_trace: bool = True
    n_circuits: int | None = None
    seed: int | None = None


@dataclass
class PathSpec:
    mode: str = "WEIGHTED"
    bias_strength: float = 0.0
    n_circuits: int = 1000
    seed: int | None = None


@dataclass
class AnonymitySpec:
    lemma_n: int = 6
    claim2_n: int = 6
    claim2_samples: int = 10_000
    claim2_sample_n: int = 30
    claim3_n: int = 6
    bias_strength: float = 2.0


@dataclass
class TingSpec:
    quadruples: int = 20
    samples: int = 10


@dataclass
class Scenario:
    seed: int = 0
    topology: TopologySpec = field(default_factory=TopologySpec)
    latency: dict = field(default_factory=lambda: {"ell": 5, "update_period_ms": 86_400_000.0,
                                                   "ping_samples": 10})
    race: RaceSpec = field(default_factory=RaceSpec)
    simulation: SimulationSpec = field(default_factory=SimulationSpec)
    path_selection: PathSpec = field(default_factory=PathSpec)
    support: Any = "ALL"
    cutoffs: list = field(default_factory=lambda: [0.0, 10.0, 25.0, 50.0, 100.0])
    deployment_ks: list = field(default_factory=lambda: [0, 10, 25, 50])
    anonymity: AnonymitySpec = field(default_factory=AnonymitySpec)
    ting: TingSpec = field(default_factory=TingSpec)
    out: str | None = None

    # ---------------------------------------------------------- resolution

    def resolve(self) -> "Scenario":
        """Fill every seed so the serialized scenario alone reproduces the run."""
        s = copy.deepcopy(self)
        if s.topology.generator is not None and s.topology.generator.seed is None:
            s.topology.generator.seed = s.seed
        if s.path_selection.seed is None:
            s.path_selection.seed = s.seed + 1
        if s.simulation.seed is None:
            s.simulation.seed = s.seed + 2
        LatencyConfig(**s.latency)
        return s

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # ---------------------------------------------------------- builders

    def latency_config(self) -> LatencyConfig:
        return LatencyConfig(**self.latency)

    def topology_config(self) -> TopologyConfig:
        g = self.topology.generator
        return TopologyConfig(
            n_relays=g.n_relays,
            regions=[(str(code), float(frac)) for code, frac in g.regions],
            intra_region_base_ms=g.intra_region_base_ms,
            inter_region_base_ms=[list(map(float, row)) for row in g.inter_region_base_ms],
            jitter_fraction=g.jitter_fraction,
            tiv_probability=g.tiv_probability,
            tiv_inflation_factor=g.tiv_inflation_factor,
            seed=int(g.seed if g.seed is not None else self.seed),
            guard_fraction=g.guard_fraction,
            exit_fraction=g.exit_fraction,
            support_fraction=g.support_fraction,
            via_capacity=g.via_capacity,
            family_size=g.family_size,
        )

    def load_topology(self, base_dir: Path | None = None) -> tuple[list[RelayDescriptor],
                                                                  LatencyMatrix]:
        t = self.topology
        if t.latency_csv is not None:
            def rel(p):
                q = Path(p)
                return q if q.is_absolute() or base_dir is None else base_dir / q
            return load_latency_csv(rel(t.latency_csv),
                                    None if t.relays_csv is None else rel(t.relays_csv))
        if t.generator is None:
            raise ValueError("topology needs a generator block or latency_csv")
        return generate_topology(self.topology_config())

    def pathsel_config(self, n_circuits: int | None = None) -> PathSelConfig:
        p = self.path_selection
        return PathSelConfig(
            mode=PathMode(p.mode),
            bias_strength=p.bias_strength,
            n_circuits=n_circuits or p.n_circuits,
            seed=int(p.seed if p.seed is not None else self.seed + 1),
        )

    def overlay_config(self) -> OverlayConfig:
        s, r = self.simulation, self.race
        return OverlayConfig(
            shortor_enabled=s.shortor_enabled,
            forward_delay_ms=s.forward_delay_ms,
            service_ms=s.service_ms,
            latency=self.latency_config(),
            ping_mode=s.ping_mode,
            ping_interval_ms=s.ping_interval_ms,
            table_update_ms=s.table_update_ms,
            traffic_start_ms=s.traffic_start_ms,
            cells_per_circuit=s.cells_per_circuit,
            cell_interval_ms=s.cell_interval_ms,
            circuit_stagger_ms=s.circuit_stagger_ms,
            echo=s.echo,
            backoff=BackoffConfig(base_ms=r.backoff_base_ms, max_exponent=r.max_exponent),
            race_window_ms=r.race_window_ms,
            via_timeout_factor=r.via_timeout_factor,
            revalidate_ms=r.revalidate_ms,
            stream_idle_ms=r.stream_idle_ms,
            horizon_ms=s.horizon_ms,
            churn=[ChurnEvent(float(t), int(x), int(c)) for t, x, c in s.churn],
            record_trace=s.record_trace,
        )


_NESTED = {
    "topology": TopologySpec,
    "race": RaceSpec,
    "simulation": SimulationSpec,
    "path_selection": PathSpec,
    "anonymity": AnonymitySpec,
    "ting": TingSpec,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {', '.join(unknown)}")
    kwargs = dict(data)
    if cls is TopologySpec and "generator" in kwargs and kwargs["generator"] is not None:
        kwargs["generator"] = _build(GeneratorSpec, kwargs["generator"], f"{where}.generator")
    if cls is TopologySpec and "latency_csv" in kwargs and "generator" not in kwargs:
        kwargs["generator"] = None
    return cls(**kwargs)


def scenario_from_dict(data: dict | None) -> Scenario:
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(Scenario)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"scenario: unknown keys {', '.join(unknown)}")
    for key, cls in _NESTED.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    if "latency" in data:
        merged = Scenario().latency
        merged.update(data["latency"])
        data["latency"] = merged
    return Scenario(**data)


def load_scenario(path: str | Path | None) -> Scenario:
    if path is None:
        return Scenario()
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    return scenario_from_dict(data)
