"""Relay population and directional latency fabric.

One-way delays live in an ``n x n`` float array; a missing measurement is
stored as NaN and surfaced as ``None`` through the accessor methods.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from shortor.errors import TopologyError

MISSING = math.nan

PARETO_SHAPE = 1.2
PARETO_MIN = 1.0

RELAY_CSV_HEADER = [
    "id",
    "weight",
    "guard",
    "exit",
    "region",
    "supports_shortor",
    "via_capacity",
    "family",
]


@dataclass(frozen=True)
class RelayDescriptor:
    id: int
    weight: float
    guard_flag: bool
    exit_flag: bool
    region: str
    supports_shortor: bool = True
    via_capacity: int = 100
    family: str | None = None

    def __post_init__(self):
        if self.weight < 0:
            raise TopologyError(f"relay {self.id}: negative weight {self.weight}")
        if self.via_capacity < 0:
            raise TopologyError(f"relay {self.id}: negative via_capacity")


class LatencyMatrix:
    """Directional one-way delays in milliseconds.

    ``oneway[i, j]`` is the delay from ``i`` to ``j``; NaN marks a missing
    pair. The diagonal is always zero and the array is read-only.
    """

    def __init__(self, oneway: np.ndarray | Sequence[Sequence[float]]):
        arr = np.array(oneway, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise TopologyError(f"latency matrix must be square, got shape {arr.shape}")
        if np.any(arr[~np.isnan(arr)] < 0):
            raise TopologyError("latency matrix has negative entries")
        np.fill_diagonal(arr, 0.0)
        arr.setflags(write=False)
        self._oneway = arr

    @property
    def oneway(self) -> np.ndarray:
        return self._oneway

    @property
    def n(self) -> int:
        return self._oneway.shape[0]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LatencyMatrix):
            return NotImplemented
        return np.array_equal(self._oneway, other._oneway, equal_nan=True)

    def __repr__(self) -> str:
        missing = int(np.isnan(self._oneway).sum())
        return f"LatencyMatrix(n={self.n}, missing={missing})"

    def has(self, i: int, j: int) -> bool:
        return not math.isnan(self._oneway[i, j])

    def get(self, i: int, j: int) -> float | None:
        v = self._oneway[i, j]
        return None if math.isnan(v) else float(v)

    def rtt(self, i: int, j: int) -> float | None:
        """Round trip ``i -> j -> i``, or None if either direction is missing."""
        a, b = self._oneway[i, j], self._oneway[j, i]
        if math.isnan(a) or math.isnan(b):
            return None
        return float(a + b)

    def rtt_array(self) -> np.ndarray:
        return self._oneway + self._oneway.T

    def is_symmetric(self) -> bool:
        return np.array_equal(self._oneway, self._oneway.T, equal_nan=True)

    def with_entries(self, updates: Iterable[tuple[int, int, float]]) -> "LatencyMatrix":
        arr = self._oneway.copy()
        for i, j, v in updates:
            arr[i, j] = v
        return LatencyMatrix(arr)

    @classmethod
    def missing(cls, n: int) -> "LatencyMatrix":
        return cls(np.full((n, n), MISSING))

    @classmethod
    def uniform(cls, n: int, ms: float) -> "LatencyMatrix":
        return cls(np.full((n, n), float(ms)))


@dataclass(frozen=True)
class TopologyConfig:
    n_relays: int
    regions: list[tuple[str, float]] = field(default_factory=lambda: [("R0", 1.0)])
    intra_region_base_ms: float = 20.0
    inter_region_base_ms: list[list[float]] = field(default_factory=lambda: [[0.0]])
    jitter_fraction: float = 0.1
    tiv_probability: float = 0.05
    tiv_inflation_factor: float = 3.0
    seed: int = 0
    guard_fraction: float = 0.5
    exit_fraction: float = 0.3
    support_fraction: float = 1.0
    via_capacity: int = 100
    family_size: int = 1

    def validate(self) -> None:
        if self.n_relays < 4:
            raise TopologyError(
                f"n_relays={self.n_relays}: need at least 4 (three circuit relays plus one via)"
            )
        if not self.regions:
            raise TopologyError("at least one region is required")
        total = sum(frac for _, frac in self.regions)
        if abs(total - 1.0) > 1e-9:
            raise TopologyError(f"region fractions sum to {total}, expected 1")
        if any(frac < 0 for _, frac in self.regions):
            raise TopologyError("region fractions must be non-negative")
        k = len(self.regions)
        if len(self.regions) > 1:
            if len(self.inter_region_base_ms) != k or any(
                len(row) != k for row in self.inter_region_base_ms
            ):
                raise TopologyError(f"inter_region_base_ms must be {k}x{k}")
        if not 0.0 <= self.jitter_fraction <= 1.0:
            raise TopologyError("jitter_fraction must lie in [0, 1]")
        if not 0.0 <= self.tiv_probability <= 1.0:
            raise TopologyError("tiv_probability must lie in [0, 1]")
        if self.tiv_inflation_factor <= 1.0:
            raise TopologyError("tiv_inflation_factor must exceed 1")
        for name in ("guard_fraction", "exit_fraction", "support_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TopologyError(f"{name} must lie in [0, 1]")
        if self.family_size < 1:
            raise TopologyError("family_size must be >= 1")

    def base_ms(self, a: int, b: int) -> float:
        """Base one-way delay between region indices ``a`` and ``b``."""
        if a == b:
            return self.intra_region_base_ms
        return float(self.inter_region_base_ms[a][b])

    def region_distances(self) -> dict[tuple[str, str], float]:
        """Region distance normalized to [0, 1] by the largest base delay."""
        names = [name for name, _ in self.regions]
        k = len(names)
        base = [[self.base_ms(a, b) for b in range(k)] for a in range(k)]
        top = max(max(row) for row in base) or 1.0
        out = {}
        for a in range(k):
            for b in range(k):
                out[(names[a], names[b])] = 0.0 if a == b else base[a][b] / top
        return out


def _region_counts(n: int, fractions: Sequence[float]) -> list[int]:
    # largest-remainder apportionment
    raw = [n * f for f in fractions]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def generate_topology(cfg: TopologyConfig) -> tuple[list[RelayDescriptor], LatencyMatrix]:
    """Draw a synthetic relay population and latency matrix.

    Weights are Pareto(1.2) with minimum 1.0. Each directed entry is
    ``base(region_i, region_j) * (1 + U(-jitter, +jitter))`` and, with
    probability ``tiv_probability`` (independently per direction), further
    multiplied by ``tiv_inflation_factor``.
    """
    cfg.validate()
    n = cfg.n_relays
    rng = np.random.default_rng(cfg.seed)

    counts = _region_counts(n, [frac for _, frac in cfg.regions])
    region_idx = np.repeat(np.arange(len(cfg.regions)), counts)
    rng.shuffle(region_idx)

    weights = rng.pareto(PARETO_SHAPE, size=n) + PARETO_MIN
    guard = rng.random(n) < cfg.guard_fraction
    exit_ = rng.random(n) < cfg.exit_fraction
    support = rng.random(n) < cfg.support_fraction
    # a valid network needs at least one guard and one exit
    if not guard.any():
        guard[int(np.argmax(weights))] = True
    if not exit_.any():
        exit_[int(np.argmin(weights))] = True

    k = len(cfg.regions)
    base_table = np.array([[cfg.base_ms(a, b) for b in range(k)] for a in range(k)])
    base = base_table[region_idx[:, None], region_idx[None, :]]
    jitter = rng.uniform(-cfg.jitter_fraction, cfg.jitter_fraction, size=(n, n))
    oneway = base * (1.0 + jitter)
    tiv = rng.random((n, n)) < cfg.tiv_probability
    oneway = np.where(tiv, oneway * cfg.tiv_inflation_factor, oneway)

    relays = []
    for i in range(n):
        family = None
        if cfg.family_size > 1:
            family = f"F{i // cfg.family_size}"
        relays.append(
            RelayDescriptor(
                id=i,
                weight=float(weights[i]),
                guard_flag=bool(guard[i]),
                exit_flag=bool(exit_[i]),
                region=cfg.regions[region_idx[i]][0],
                supports_shortor=bool(support[i]),
                via_capacity=cfg.via_capacity,
                family=family,
            )
        )
    return relays, LatencyMatrix(oneway)


def validate_relays(relays: Sequence[RelayDescriptor]) -> None:
    ids = [r.id for r in relays]
    if ids != list(range(len(relays))):
        raise TopologyError("relay ids must be unique and contiguous from 0, in order")
    if not any(r.guard_flag for r in relays):
        raise TopologyError("no relay carries the guard flag")
    if not any(r.exit_flag for r in relays):
        raise TopologyError("no relay carries the exit flag")


def default_relays(n: int) -> list[RelayDescriptor]:
    """Unit-weight descriptors with every flag set, for bare latency files."""
    return [
        RelayDescriptor(id=i, weight=1.0, guard_flag=True, exit_flag=True, region="ZZ")
        for i in range(n)
    ]


# ---------------------------------------------------------------- CSV I/O


def _parse_bool(text: str, lineno: int, path: Path) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "y", "t"):
        return True
    if t in ("0", "false", "no", "n", "f"):
        return False
    raise TopologyError(f"{path}:{lineno}: not a boolean: {text!r}")


def load_relays_csv(path: str | Path) -> list[RelayDescriptor]:
    path = Path(path)
    relays = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RELAY_CSV_HEADER:
            raise TopologyError(f"{path}:1: expected header {','.join(RELAY_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(RELAY_CSV_HEADER):
                raise TopologyError(f"{path}:{lineno}: expected 8 fields, got {len(row)}")
            try:
                relays.append(
                    RelayDescriptor(
                        id=int(row[0]),
                        weight=float(row[1]),
                        guard_flag=_parse_bool(row[2], lineno, path),
                        exit_flag=_parse_bool(row[3], lineno, path),
                        region=row[4].strip(),
                        supports_shortor=_parse_bool(row[5], lineno, path),
                        via_capacity=int(row[6]),
                        family=row[7].strip() or None,
                    )
                )
            except TopologyError:
                raise
            except ValueError as exc:
                raise TopologyError(f"{path}:{lineno}: {exc}") from exc
    relays.sort(key=lambda r: r.id)
    validate_relays(relays)
    return relays


def save_relays_csv(relays: Sequence[RelayDescriptor], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RELAY_CSV_HEADER)
        for r in relays:
            w.writerow(
                [
                    r.id,
                    repr(float(r.weight)),
                    int(r.guard_flag),
                    int(r.exit_flag),
                    r.region,
                    int(r.supports_shortor),
                    r.via_capacity,
                    r.family or "",
                ]
            )


def _parse_ms(text: str, lineno: int, path: Path) -> float:
    text = text.strip()
    if text == "":
        return MISSING
    try:
        v = float(text)
    except ValueError:
        raise TopologyError(f"{path}:{lineno}: not a number: {text!r}") from None
    if math.isnan(v):
        return MISSING
    if v < 0:
        raise TopologyError(f"{path}:{lineno}: negative latency {v}")
    return v


def load_latency_csv(
    path: str | Path,
    relays_path: str | Path | None = None,
    n_relays: int | None = None,
) -> tuple[list[RelayDescriptor], LatencyMatrix]:
    """Read a latency file in RTT form or directed form.

    ``src,dst,rtt_ms`` rows are split into two one-way entries of ``rtt/2``;
    ``src,dst,fwd_ms,rev_ms`` rows are read as-is (an empty field is a
    missing direction). Pairs never listed are missing. The relay count
    comes from ``relays_path`` when given, else ``n_relays``, else the
    largest id seen plus one.
    """
    path = Path(path)
    rows: list[tuple[int, int, int, float, float]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TopologyError(f"{path}:1: empty file, expected a header")
        header = [h.strip() for h in header]
        if header == ["src", "dst", "rtt_ms"]:
            directed = False
        elif header == ["src", "dst", "fwd_ms", "rev_ms"]:
            directed = True
        else:
            raise TopologyError(
                f"{path}:1: header must be src,dst,rtt_ms or src,dst,fwd_ms,rev_ms"
            )
        width = 4 if directed else 3
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise TopologyError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                src, dst = int(row[0]), int(row[1])
            except ValueError:
                raise TopologyError(f"{path}:{lineno}: relay ids must be integers") from None
            if src < 0 or dst < 0:
                raise TopologyError(f"{path}:{lineno}: negative relay id")
            if src == dst:
                raise TopologyError(f"{path}:{lineno}: self pair {src},{dst}")
            if directed:
                fwd = _parse_ms(row[2], lineno, path)
                rev = _parse_ms(row[3], lineno, path)
            else:
                rtt = _parse_ms(row[2], lineno, path)
                fwd = rev = rtt / 2.0
            rows.append((lineno, src, dst, fwd, rev))

    if relays_path is not None:
        relays = load_relays_csv(relays_path)
        n = len(relays)
    else:
        seen_max = max((max(s, d) for _, s, d, _, _ in rows), default=-1)
        n = n_relays if n_relays is not None else seen_max + 1
        relays = default_relays(n)

    arr = np.full((n, n), MISSING)
    filled: dict[tuple[int, int], int] = {}
    for lineno, src, dst, fwd, rev in rows:
        if src >= n or dst >= n:
            raise TopologyError(f"{path}:{lineno}: relay id out of range for {n} relays")
        for a, b, v in ((src, dst, fwd), (dst, src, rev)):
            if math.isnan(v):
                continue
            if (a, b) in filled:
                raise TopologyError(
                    f"{path}:{lineno}: duplicate directed pair {a}->{b} "
                    f"(first given on line {filled[(a, b)]})"
                )
            filled[(a, b)] = lineno
            arr[a, b] = v
    return relays, LatencyMatrix(arr)


def save_latency_csv(matrix: LatencyMatrix, path: str | Path) -> None:
    """Write the matrix in directed form; fully missing pairs are omitted."""
    m = matrix.oneway
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "fwd_ms", "rev_ms"])
        for i in range(matrix.n):
            for j in range(i + 1, matrix.n):
                a, b = m[i, j], m[j, i]
                if math.isnan(a) and math.isnan(b):
                    continue
                w.writerow(
                    [
                        i,
                        j,
                        "" if math.isnan(a) else repr(float(a)),
                        "" if math.isnan(b) else repr(float(b)),
                    ]
                )


def top_k_by_weight(relays: Sequence[RelayDescriptor], k: int) -> frozenset[int]:
    """Ids of the ``k`` heaviest relays; ties broken by lower id."""
    order = sorted(relays, key=lambda r: (-r.weight, r.id))
    return frozenset(r.id for r in order[: max(k, 0)])
