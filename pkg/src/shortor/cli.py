"""Command-line front end.

Every subcommand writes its tables plus ``scenario.json`` (the fully
resolved scenario) and ``manifest.json`` (tool version, subcommand, seed)
into ``--out``. Identical scenarios give byte-identical output files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from shortor import __version__
from shortor import anonymity as anon
from shortor import evaluation as ev
from shortor.errors import ShorTorError
from shortor.overlay import OverlaySim
from shortor.pathsel import Circuit, PathMode, PathSelConfig, sample_circuits, write_circuits_csv
from shortor.scenario import Scenario, load_scenario
from shortor.topology import (
    LatencyMatrix,
    TopologyConfig,
    generate_topology,
    save_latency_csv,
    save_relays_csv,
    top_k_by_weight,
)

log = logging.getLogger("shortor")


# ---------------------------------------------------------------- helpers


def _prepare(args) -> tuple[Scenario, Path]:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
        if scenario.topology.generator is not None:
            scenario.topology.generator.seed = None
        scenario.path_selection.seed = None
        scenario.simulation.seed = None
    out = Path(args.out or scenario.out or "shortor-out")
    scenario.out = None
    scenario = scenario.resolve()
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(scenario.to_json())
    manifest = {"tool": "shortor", "version": __version__, "subcommand": args.command,
                "seed": scenario.seed}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("%s: seed %d, writing to %s", args.command, scenario.seed, out)
    return scenario, out


def _base_dir(args) -> Path | None:
    return None if args.scenario is None else Path(args.scenario).resolve().parent


def _topology(scenario: Scenario, args):
    return scenario.load_topology(_base_dir(args))


def _circuits(scenario: Scenario, relays, n: int | None = None) -> list[Circuit]:
    cfg = scenario.pathsel_config(n)
    regions = sorted({r.region for r in relays})
    return sample_circuits(relays, cfg, client_regions=regions)


def _summary(out: Path, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.3f}"


# ------------------------------------------------------------ subcommands


def cmd_gen_topology(args) -> int:
    scenario, out = _prepare(args)
    relays, matrix = _topology(scenario, args)
    save_relays_csv(relays, out / "relays.csv")
    save_latency_csv(matrix, out / "latency.csv")
    _summary(out, [
        f"relays: {len(relays)}",
        f"guards: {sum(r.guard_flag for r in relays)}",
        f"exits: {sum(r.exit_flag for r in relays)}",
        f"shortor support: {sum(r.supports_shortor for r in relays)}",
    ])
    return 0


def cmd_simulate(args) -> int:
    scenario, out = _prepare(args)
    relays, matrix = _topology(scenario, args)
    n = scenario.simulation.n_circuits or scenario.path_selection.n_circuits
    circuits = [c for c in _circuits(scenario, relays, n)
                if all(matrix.has(a, b) and matrix.has(b, a)
                       for a, b in ((c.guard, c.middle), (c.middle, c.exit)))]
    write_circuits_csv(circuits, out / "circuits.csv")
    sim = OverlaySim(relays, matrix, circuits, scenario.overlay_config(),
                     seed=int(scenario.simulation.seed)).run()
    sim.write_outputs(out)
    cons = sim.conservation()
    _summary(out, [
        f"circuits simulated: {len(circuits)} of {n} sampled",
        f"ell: {scenario.latency['ell']}",
        f"races: {len(sim.races)}",
        f"via swaps: {len(sim.swaps)}",
        f"failovers: {len(sim.failovers)}",
        f"events: {len(sim.sim.trace)}",
        f"cell copies created={cons['created']} delivered={cons['delivered']} "
        f"dropped={cons['dropped']} live={cons['live']} balanced={cons['balanced']}",
        "reverse legs may use a different via than the forward legs",
    ])
    return 0


def cmd_eval_pairs(args) -> int:
    scenario, out = _prepare(args)
    relays, matrix = _topology(scenario, args)
    support = ev.support_from_rule(relays, scenario.support)
    pairs = ev.pair_speedups(matrix, support, scenario.simulation.forward_delay_ms)
    ev.write_pairs_csv(pairs, out / "pairs.csv")
    present = [p for p in pairs if p.direct_rtt is not None]
    direct = [p.direct_rtt for p in present]
    short = [p.shortor_rtt for p in present]
    lines = [f"pairs: {len(pairs)} ({len(present)} with direct data)"]
    for p in ev.PERCENTILES:
        lines.append(f"p{p:g} direct={_fmt(ev.nearest_rank(direct, p))} "
                     f"shortor={_fmt(ev.nearest_rank(short, p))}")
    if present:
        halved = sum(1 for p in present if p.shortor_rtt <= p.direct_rtt / 2)
        lines.append(f"max direct={_fmt(max(direct))} max shortor={_fmt(max(short))}")
        lines.append(f"pairs at least halved: {halved / len(present):.4f}")
    _summary(out, lines)
    return 0


def cmd_eval_circuits(args) -> int:
    scenario, out = _prepare(args)
    relays, matrix = _topology(scenario, args)
    support = ev.support_from_rule(relays, scenario.support)
    circuits = _circuits(scenario, relays)
    cutoff = float(scenario.cutoffs[0]) if scenario.cutoffs else 0.0
    res = ev.circuit_speedups(circuits, matrix, support, cutoff,
                              scenario.simulation.forward_delay_ms, relays)
    ev.write_circuits_csv(res, out / "circuits.csv")
    totals = [r.total for r in res]
    lines = [f"circuits: {len(res)} cutoff_ms={cutoff:g}"]
    lines += [f"p{p:g}={_fmt(v)}" for p, v in ev.percentile_table(totals).items()]
    _summary(out, lines)
    return 0


def cmd_incremental(args) -> int:
    scenario, out = _prepare(args)
    relays, matrix = _topology(scenario, args)
    circuits = _circuits(scenario, relays)
    ks = [int(k) for k in scenario.deployment_ks]
    cutoff = float(scenario.cutoffs[0]) if scenario.cutoffs else 0.0
    rows = ev.incremental_deployment(circuits, matrix, relays, ks, cutoff,
                                     scenario.simulation.forward_delay_ms)
    ev.write_percentiles_csv(rows, out / "percentiles.csv")
    _summary(out, [f"k={r.k} " + " ".join(f"p{p:g}={_fmt(v)}" for p, v in r.percentiles.items())
                   + f" (n={r.n_circuits})" for r in rows])
    return 0


def cmd_overhead(args) -> int:
    scenario, out = _prepare(args)
    relays, matrix = _topology(scenario, args)
    support = ev.support_from_rule(relays, scenario.support)
    circuits = _circuits(scenario, relays)
    reports = ev.overhead(circuits, matrix, support, [float(c) for c in scenario.cutoffs],
                          scenario.simulation.forward_delay_ms, relays)
    ev.write_overhead_csv(reports, out / "overhead.csv")
    _summary(out, [f"cutoff {r.cutoff_ms:g} ms: via legs {r.via_transits}, "
                   f"overhead {r.overhead_fraction:.4f}" for r in reports])
    return 0


def cmd_network_share(args) -> int:
    scenario, out = _prepare(args)
    relays, matrix = _topology(scenario, args)
    circuits = _circuits(scenario, relays)
    cutoff = float(scenario.cutoffs[0]) if scenario.cutoffs else 0.0
    rows, lines = [], []
    ks = sorted({int(k) for k in scenario.deployment_ks} | {len(relays)})
    if ks[-1] > len(relays):
        raise ValueError(f"k={ks[-1]} exceeds relay count {len(relays)}")
    for k in ks:
        support = top_k_by_weight(relays, k)
        res = ev.circuit_speedups(circuits, matrix, support, cutoff,
                                  scenario.simulation.forward_delay_ms, relays)
        vias = [r.vias for r in res]
        share = anon.network_share(circuits, vias, relays, deployment_k=k)
        rows.extend(share)
        lines.append(f"k={k}: max tor share={max(s.tor_share for s in share):.4f} "
                     f"max shortor share={max(s.shortor_share for s in share):.4f}")
        for region, (t, s) in anon.region_shares(circuits, vias, relays).items():
            lines.append(f"  region {region}: tor={t:.4f} shortor={s:.4f}")
    anon.write_share_csv(rows, out / "network_share.csv")
    _summary(out, lines)
    return 0


def cmd_anonymity_check(args) -> int:
    scenario, out = _prepare(args)
    a = scenario.anonymity
    lines = []
    rep = anon.verify_lemma1(a.lemma_n)
    lines.append(rep.summary(f"lemma1 n={a.lemma_n}"))
    rep2 = anon.verify_claim2(anon.all_placements(a.claim2_n))
    lines.append(rep2.summary(f"claim2 exhaustive n={a.claim2_n}"))
    rng = np.random.default_rng(scenario.seed)
    rep3 = anon.verify_claim2(anon.random_placements(a.claim2_sample_n, a.claim2_samples, rng))
    lines.append(rep3.summary(f"claim2 random n={a.claim2_sample_n}"))

    gen = scenario.topology_config()
    small = TopologyConfig(**{**gen.__dict__, "n_relays": a.claim3_n})
    relays, matrix = generate_topology(small)
    oracle = ev.ViaOracle(matrix, range(matrix.n), scenario.simulation.forward_delay_ms)
    families = [r.family for r in relays]

    def selector(c: Circuit):
        return ev.assign_circuit(oracle, c, 0.0, families)[0]

    regions = sorted({name for name, _ in small.regions})
    dist = small.region_distances()
    for mode, bias in ((PathMode.WEIGHTED, 0.0), (PathMode.LOCATION_BIASED, a.bias_strength)):
        cfg = PathSelConfig(mode=mode, bias_strength=bias, region_distance=dist)
        r = anon.compare_regions(relays, cfg, regions, selector)
        lines.append(f"claim3 {mode.value} bias={bias:g}: max gap {r.max_difference:.3e} "
                     f"over {r.compared} entries")
    _summary(out, lines)
    return 0 if rep.ok and rep2.ok and rep3.ok else 1


def cmd_ting(args) -> int:
    scenario, out = _prepare(args)
    relays, matrix = _topology(scenario, args)
    rng = np.random.default_rng(scenario.seed)
    fwd = scenario.simulation.forward_delay_ms
    rows = []
    n = matrix.n
    for _ in range(scenario.ting.quadruples):
        a, b, host = (int(x) for x in rng.choice(n, size=3, replace=False))
        m2, o1, o2 = ev.with_colocated_observers(matrix, host)
        if not all(matrix.has(x, y) for x, y in ((a, b), (b, a), (host, a), (a, host),
                                                 (host, b), (b, host))):
            continue
        res = ev.ting_estimate(o1, o2, a, b, m2, forward_delay_ms=fwd, service_ms=0.0,
                               samples=scenario.ting.samples)
        truth = matrix.rtt(a, b)
        rows.append((o1, o2, a, b, host, res.estimate_ms, truth, res.estimate_ms - truth - 2 * fwd,
                     res.asymmetry))
    ev.write_rows(out / "ting.csv", ["obs1", "obs2", "a", "b", "host", "estimate_ms",
                                     "true_rtt_ms", "error_ms", "asymmetry"], rows)
    errs = [abs(r[7]) for r in rows]
    asym = [r[8] for r in rows]
    _summary(out, [
        f"quadruples: {len(rows)}",
        f"max |estimate - (truth + forward delays)|: {_fmt(max(errs) if errs else float('nan'))}",
        f"median asymmetry: {_fmt(float(np.median(asym)) if asym else float('nan'))}",
    ])
    return 0


COMMANDS = {
    "gen-topology": cmd_gen_topology,
    "simulate": cmd_simulate,
    "eval-pairs": cmd_eval_pairs,
    "eval-circuits": cmd_eval_circuits,
    "incremental": cmd_incremental,
    "overhead": cmd_overhead,
    "network-share": cmd_network_share,
    "anonymity-check": cmd_anonymity_check,
    "ting": cmd_ting,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shortor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"shortor {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", help="scenario file (JSON or YAML)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ShorTorError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
