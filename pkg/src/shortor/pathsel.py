"""Bandwidth-weighted circuit sampling with an optional location bias.

Positions are filled exit, then guard, then middle, each by inverse-CDF
sampling over the remaining eligible relays. Relays sharing a family with
an already chosen relay are ineligible. The location-biased mode scales
every weight by ``exp(-bias * distance(client_region, relay_region))``.
"""

from __future__ import annotations

import csv
import enum
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from shortor.errors import Exhausted
from shortor.topology import RelayDescriptor


class PathMode(str, enum.Enum):
    WEIGHTED = "WEIGHTED"
    LOCATION_BIASED = "LOCATION_BIASED"


@dataclass(frozen=True)
class Circuit:
    guard: int
    middle: int
    exit: int
    client_region: str = ""

    @property
    def relays(self) -> tuple[int, int, int]:
        return (self.guard, self.middle, self.exit)


def unit_distance(a: str, b: str) -> float:
    return 0.0 if a == b else 1.0


@dataclass(frozen=True)
class PathSelConfig:
    mode: PathMode = PathMode.WEIGHTED
    bias_strength: float = 0.0
    n_circuits: int = 1000
    seed: int = 0
    region_distance: Mapping[tuple[str, str], float] | None = field(default=None, hash=False)

    def __post_init__(self):
        if self.n_circuits < 1:
            raise ValueError("n_circuits must be >= 1")
        if self.bias_strength < 0:
            raise ValueError("bias_strength must be >= 0")
        object.__setattr__(self, "mode", PathMode(self.mode))

    def distance(self, a: str, b: str) -> float:
        if self.region_distance is not None:
            if (a, b) in self.region_distance:
                return float(self.region_distance[(a, b)])
        return unit_distance(a, b)


class _Population:
    """Array view of the descriptors used by both sampling and exact probabilities."""

    def __init__(self, descriptors: Sequence[RelayDescriptor]):
        self.n = len(descriptors)
        self.weight = np.array([r.weight for r in descriptors], dtype=float)
        self.guard = np.array([r.guard_flag for r in descriptors], dtype=bool)
        self.exit = np.array([r.exit_flag for r in descriptors], dtype=bool)
        self.regions = [r.region for r in descriptors]
        fams = [r.family for r in descriptors]
        # relays without a family form singleton families
        labels: dict[object, int] = {}
        self.family = np.array(
            [labels.setdefault(("F", f) if f is not None else ("R", i), len(labels))
             for i, f in enumerate(fams)]
        )
        self.positive = self.weight > 0
        self._fam_count = np.bincount(self.family[self.positive], minlength=len(labels))
        self._exit_ok: np.ndarray | None = None

    def guard_ok(self, exit_id: int) -> np.ndarray:
        """Guards that leave at least one middle candidate given ``exit_id``."""
        fam = self.family
        left = self.positive.sum() - self._fam_count[fam[exit_id]] - self._fam_count[fam]
        return self.guard & self.positive & (fam != fam[exit_id]) & (left > 0)

    def exit_ok(self) -> np.ndarray:
        """Exits that admit a complete circuit; cached since it ignores weight scaling."""
        if self._exit_ok is None:
            ok = self.exit & self.positive
            self._exit_ok = np.array([bool(ok[e]) and bool(self.guard_ok(e).any())
                                      for e in range(self.n)], dtype=bool)
        return self._exit_ok

    def weights(self, cfg: PathSelConfig, client_region: str) -> np.ndarray:
        if cfg.mode == PathMode.WEIGHTED:
            return self.weight
        d = np.array([cfg.distance(client_region, r) for r in self.regions])
        return self.weight * np.exp(-cfg.bias_strength * d)

    def masks(self, exit_id: int | None = None, guard_id: int | None = None):
        excluded = np.zeros(self.n, dtype=bool)
        for x in (exit_id, guard_id):
            if x is not None:
                excluded |= self.family == self.family[x]
        return excluded


def _draw(weights: np.ndarray, rng: np.random.Generator, position: str) -> int:
    total = weights.sum()
    if not total > 0:
        raise Exhausted(f"EXHAUSTED: no eligible relay for the {position} position")
    cum = np.cumsum(weights)
    u = rng.random() * cum[-1]
    idx = int(np.searchsorted(cum, u, side="right"))
    # guard against landing on a zero-weight tail through rounding
    idx = min(idx, len(weights) - 1)
    while weights[idx] <= 0:
        idx -= 1
    return idx


def sample_circuit(
    descriptors: Sequence[RelayDescriptor] | _Population,
    cfg: PathSelConfig,
    rng: np.random.Generator,
    client_region: str = "",
) -> Circuit:
    """Exit, then guard, then middle, each restricted to choices that can still complete."""
    pop = descriptors if isinstance(descriptors, _Population) else _Population(descriptors)
    if pop.n < 3:
        raise Exhausted("EXHAUSTED: fewer than three relays")
    w = pop.weights(cfg, client_region)
    e = _draw(np.where(pop.exit_ok(), w, 0.0), rng, "exit")
    g = _draw(np.where(pop.guard_ok(e), w, 0.0), rng, "guard")
    ex = pop.masks(exit_id=e, guard_id=g)
    m = _draw(np.where(~ex, w, 0.0), rng, "middle")
    return Circuit(g, m, e, client_region)


def sample_circuits(
    descriptors: Sequence[RelayDescriptor],
    cfg: PathSelConfig,
    client_regions: Sequence[str] | Callable[[int], str] | None = None,
    rng: np.random.Generator | None = None,
) -> list[Circuit]:
    """Draw ``cfg.n_circuits`` independent circuits from ``cfg.seed``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pop = _Population(descriptors)
    out = []
    for k in range(cfg.n_circuits):
        if client_regions is None:
            region = ""
        elif callable(client_regions):
            region = client_regions(k)
        else:
            region = client_regions[k % len(client_regions)]
        out.append(sample_circuit(pop, cfg, rng, region))
    return out


def is_valid_circuit(descriptors: Sequence[RelayDescriptor], circuit: Circuit) -> bool:
    g, m, e = circuit.relays
    n = len(descriptors)
    if not all(0 <= x < n for x in (g, m, e)) or len({g, m, e}) != 3:
        return False
    if not descriptors[g].guard_flag or not descriptors[e].exit_flag:
        return False
    fams = [descriptors[x].family for x in (g, m, e)]
    named = [f for f in fams if f is not None]
    return len(named) == len(set(named))


def selection_probability(
    descriptors: Sequence[RelayDescriptor] | _Population,
    cfg: PathSelConfig,
    circuit: Circuit,
    client_region: str | None = None,
) -> float:
    """Exact probability that :func:`sample_circuit` returns ``circuit``."""
    if isinstance(descriptors, _Population):
        raise TypeError("pass the descriptor list")
    if not is_valid_circuit(descriptors, circuit):
        return 0.0
    pop = _Population(descriptors)
    region = circuit.client_region if client_region is None else client_region
    return _probability(pop, cfg, circuit.relays, region)


def _probability(pop: _Population, cfg: PathSelConfig, relays, region: str) -> float:
    g, m, e = relays
    w = pop.weights(cfg, region)
    we = np.where(pop.exit_ok(), w, 0.0)
    if we.sum() <= 0 or we[e] <= 0:
        return 0.0
    p = we[e] / we.sum()
    wg = np.where(pop.guard_ok(e), w, 0.0)
    if wg[g] <= 0:
        return 0.0
    p *= wg[g] / wg.sum()
    wm = np.where(~pop.masks(exit_id=e, guard_id=g), w, 0.0)
    if wm[m] <= 0:
        return 0.0
    return float(p * wm[m] / wm.sum())


def enumerate_circuits(descriptors: Sequence[RelayDescriptor]) -> Iterator[Circuit]:
    """Every valid ordered (guard, middle, exit) triple."""
    n = len(descriptors)
    for g, m, e in itertools.permutations(range(n), 3):
        c = Circuit(g, m, e)
        if is_valid_circuit(descriptors, c):
            yield c


def circuit_distribution(
    descriptors: Sequence[RelayDescriptor],
    cfg: PathSelConfig,
    client_region: str = "",
) -> dict[tuple[int, int, int], float]:
    """Exact distribution over valid circuits, keyed by relay triple."""
    pop = _Population(descriptors)
    out = {}
    for c in enumerate_circuits(descriptors):
        p = _probability(pop, cfg, c.relays, client_region)
        if p > 0:
            out[c.relays] = p
    return out


def write_circuits_csv(circuits: Iterable[Circuit], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["circ_id", "guard", "middle", "exit", "client_region"])
        for k, c in enumerate(circuits):
            w.writerow([k, c.guard, c.middle, c.exit, c.client_region])


def read_circuits_csv(path: str | Path) -> list[Circuit]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Circuit(int(r["guard"]), int(r["middle"]), int(r["exit"]), r["client_region"])
            for r in rows]

