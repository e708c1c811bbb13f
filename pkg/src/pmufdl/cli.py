"""Command-line interface.

Subcommands: place, clusters, check-observability, simulate, run-fdla,
campaign.  All outputs are reproducible from the input files plus the seed.
Exit codes: 0 success, 1 malformed input file, 2 infeasible placement /
observability violation / stream-grid mismatch.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimation import ObservabilityError
from .fdla import FaultDetector, FdlaConfig, FdlaReport, run_fdla
from .grid import GridModel, GridModelError, add_fake_nodes
from .gridio import (
    GridFileError, load_grid, load_placement_monitored, save_placement,
)
from .noise import NoiseParams
from .observability import (
    check_extended_observability, check_plain_observability,
    compute_clusters, empirical_cluster_oracle, rank_observability,
    single_line_ufcs,
)
from .placement import InfeasiblePlacementError, build_problem, place
from .simulation import (
    SimulationError, grid_for_scenario, load_scenarios, make_truth_series,
    run_campaign, stream_from_csv, stream_to_csv, synthesize_measurements,
)

EXIT_OK = 0
EXIT_BAD_INPUT = 1
EXIT_INFEASIBLE = 2


@dataclass(frozen=True)
class RunManifest:
    """Everything a command needs to be reproducible."""

    grid_path: Path
    placement_file: Path | None = None
    solve_cost_option: str | None = None
    forced_split_nodes: tuple[int, ...] = ()
    scenario_path: Path | None = None
    noise: NoiseParams = NoiseParams()
    seed: int = 0
    out_dir: Path = Path(".")

    def __post_init__(self):
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not self.grid_path.exists():
            raise FileNotFoundError(f"grid file not found: {self.grid_path}")
        for p in (self.placement_file, self.scenario_path):
            if p is not None and not p.exists():
                raise FileNotFoundError(f"input file not found: {p}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--grid", required=True, help="grid description file (YAML)")
    parser.add_argument("--seed", type=int, default=0, help="campaign/stream seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--placement", default=None,
                        help="placement JSON fixing the monitored set "
                             "(default: the grid file's monitored flags)")
    parser.add_argument("--noise-v-mag", type=float, default=None)
    parser.add_argument("--noise-i-mag", type=float, default=None)
    parser.add_argument("--noise-v-phase", type=float, default=None)
    parser.add_argument("--noise-i-phase", type=float, default=None)
    parser.add_argument("--sample-period", type=float, default=None)


def _manifest(args, need_scenarios: bool = False) -> RunManifest:
    base = NoiseParams()
    noise = NoiseParams(
        sigma_v_mag=args.noise_v_mag if args.noise_v_mag is not None else base.sigma_v_mag,
        sigma_i_mag=args.noise_i_mag if args.noise_i_mag is not None else base.sigma_i_mag,
        sigma_v_phase=(args.noise_v_phase if args.noise_v_phase is not None
                       else base.sigma_v_phase),
        sigma_i_phase=(args.noise_i_phase if args.noise_i_phase is not None
                       else base.sigma_i_phase),
        sample_period=(args.sample_period if args.sample_period is not None
                       else base.sample_period))
    return RunManifest(
        grid_path=Path(args.grid),
        placement_file=Path(args.placement) if args.placement else None,
        scenario_path=Path(args.scenarios) if need_scenarios else None,
        noise=noise,
        seed=args.seed,
        out_dir=Path(args.out))


def _load_grid_checked(manifest: RunManifest) -> GridModel:
    grid = load_grid(manifest.grid_path)
    if manifest.placement_file is not None:
        grid = grid.with_monitored(load_placement_monitored(manifest.placement_file))
    return grid


def _print_partition(partition) -> None:
    print(f"clusters: r = {partition.r}")
    print(f"separator nodes: {sorted(partition.separator_nodes) or '-'}")
    label = 0
    for c in partition.clusters:
        if c.hypothesis_eligible:
            label += 1
            tag = f"cluster {label}"
        else:
            tag = "excluded "
        print(f"  {tag}: branches {sorted(c.branches)} "
              f"(representative {c.representative})")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_place(args) -> int:
    manifest = _manifest(args)
    grid = load_grid(manifest.grid_path)
    forced = tuple(int(x) for x in args.forced_split.split(",")) \
        if args.forced_split else ()
    try:
        solution = place(grid, args.cost, forced)
    except InfeasiblePlacementError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(f"cost option: {args.cost}")
    print(f"d = {solution.d}   cost = {solution.cost:g}   r = {solution.r}   "
          f"optimal = {solution.optimal}")
    print("gamma =", "".join(str(g) for g in solution.gamma))
    print("monitored nodes:", list(solution.monitored_ids))
    partition = compute_clusters(grid, solution.monitored_ids)
    _print_partition(partition)
    if args.save:
        out = manifest.out_dir / args.save
        out.parent.mkdir(parents=True, exist_ok=True)
        save_placement(solution, out)
        print(f"placement written to {out}")
    return EXIT_OK


def cmd_clusters(args) -> int:
    manifest = _manifest(args)
    grid = _load_grid_checked(manifest)
    th = check_extended_observability(grid)
    if not th.ok:
        print("monitored set violates the adjacency condition at nodes "
              f"{sorted(th.violations)}", file=sys.stderr)
        return EXIT_INFEASIBLE
    partition = compute_clusters(grid)
    _print_partition(partition)
    if args.colors:
        color = {}
        label = 0
        for c in partition.clusters:
            label += 1
            for b in sorted(c.branches):
                color[b] = label
        print("branch colors:",
              " ".join(f"{b}:{color[b]}" for b in sorted(color)))
    if args.verify:
        oracle = empirical_cluster_oracle(grid, trials=args.trials,
                                          seed=manifest.seed)
        agree = partition.same_partition(oracle)
        print(f"empirical oracle ({args.trials} trials): "
              f"{'agrees' if agree else 'DISAGREES'}")
        if not agree:
            print("oracle clusters:")
            for c in oracle.eligible_clusters:
                print(f"  {sorted(c.branches)}")
            return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_check_observability(args) -> int:
    manifest = _manifest(args)
    grid = _load_grid_checked(manifest)
    lemma = check_plain_observability(grid)
    theorem = check_extended_observability(grid)
    rank = rank_observability(grid)
    print(f"monitored nodes: {list(grid.monitored_ids)}")
    print(f"plain-grid sufficient condition: {'pass' if lemma.ok else 'FAIL'}"
          + (f"  (nodes {sorted(lemma.violations)})" if not lemma.ok else ""))
    print(f"virtual-extension condition:     {'pass' if theorem.ok else 'FAIL'}"
          + (f"  (nodes {sorted(theorem.violations)})" if not theorem.ok else ""))
    print(f"numerical rank observability:    {'pass' if rank else 'FAIL'}")
    return EXIT_OK if theorem.ok and rank else EXIT_INFEASIBLE


def cmd_simulate(args) -> int:
    manifest = _manifest(args, need_scenarios=True)
    grid = _load_grid_checked(manifest)
    scenarios = load_scenarios(manifest.scenario_path)
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    mon = grid.monitored_ids
    for k, scenario in enumerate(scenarios):
        work = grid_for_scenario(grid, scenario)
        fault_sample = int(np.ceil(
            scenario.fault_time / manifest.noise.sample_period - 1e-12))
        n_samples = fault_sample + args.post_samples
        truth = make_truth_series(work, scenario, n_samples,
                                  manifest.noise.sample_period)
        seed = np.random.SeedSequence(entropy=manifest.seed, spawn_key=(k,))
        stream = synthesize_measurements(truth, manifest.noise, mon, seed)
        out = manifest.out_dir / f"stream_{k:02d}.csv"
        stream_to_csv(stream, out)
        print(f"scenario {k} ({scenario.label}): {len(stream)} samples -> {out}")
    return EXIT_OK


def _write_report(report: FdlaReport, partition, out_dir: Path,
                  prefix: str = "") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "detected": report.detected,
        "detection_sample": report.detection_sample,
        "detection_time": report.detection_time,
        "cluster": report.cluster_label,
        "cluster_branches": (sorted(report.cluster_branches)
                             if report.cluster_branches else None),
        "fault_type": (str(report.fault_type)
                       if report.fault_type is not None else None),
        "threshold": report.threshold,
        "skipped_samples": list(report.skipped_samples),
        "r": partition.r,
    }
    with open(out_dir / f"{prefix}report.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    K = report.wmr_traces.shape[1] - 1
    with open(out_dir / f"{prefix}wmr_traces.csv", "w") as fh:
        fh.write("t,w0," + ",".join(f"w{l}" for l in range(1, K + 1)) + "\n")
        for t, row in zip(report.times, report.wmr_traces):
            fh.write(f"{t:.6f}," + ",".join(repr(float(v)) for v in row) + "\n")
    if report.injection_trace is not None:
        with open(out_dir / f"{prefix}injections.csv", "w") as fh:
            fh.write("t,|I_A|,|I_B|,|I_C|\n")
            for t, row in zip(report.times, report.injection_trace):
                mags = np.abs(row)
                fh.write(f"{t:.6f}," + ",".join(repr(float(v)) for v in mags) + "\n")


def cmd_run_fdla(args) -> int:
    manifest = _manifest(args)
    grid = _load_grid_checked(manifest)
    stream = stream_from_csv(args.stream)
    if stream.monitored != grid.monitored_ids:
        print(f"stream monitored set {list(stream.monitored)} does not match "
              f"the grid's {list(grid.monitored_ids)}", file=sys.stderr)
        return EXIT_INFEASIBLE
    report, partition = run_fdla(grid, stream, manifest.noise)
    _write_report(report, partition, manifest.out_dir)
    if report.detected:
        print(f"fault detected at t = {report.detection_time:.3f} s "
              f"(sample {report.detection_sample})")
        print(f"cluster {report.cluster_label}: branches "
              f"{sorted(report.cluster_branches)}")
        print(f"fault type: {report.fault_type}")
    else:
        print("no fault detected")
    print(f"report and traces written to {manifest.out_dir}")
    return EXIT_OK


def cmd_campaign(args) -> int:
    manifest = _manifest(args, need_scenarios=True)
    grid = _load_grid_checked(manifest)
    scenarios = load_scenarios(manifest.scenario_path)
    result = run_campaign(grid, scenarios, runs_per_scenario=args.runs,
                          base_seed=manifest.seed, noise=manifest.noise)
    header = f"{'scenario':34s} {'D-L':>5s} {'D-nL':>5s} {'nD-L':>5s} {'nD-nL':>6s} {'char':>5s}"
    print(header)
    rows = []
    for o in result.outcomes:
        s = o.scenario
        name = f"{s.fault_type} at {s.position:.0%} of branch {s.branch}"
        print(f"{name:34s} {o.detected_localized:5d} {o.detected_mislocalized:5d} "
              f"{o.undetected_localized:5d} {o.undetected_mislocalized:6d} "
              f"{'ok' if o.characterization_failures == 0 else o.characterization_failures:>5}")
        rows.append({
            "scenario": {"branch": s.branch, "position": s.position,
                         "type": s.fault_type,
                         "resistance": s.fault_resistance,
                         "fault_time": s.fault_time},
            "runs": o.runs,
            "D-L": o.detected_localized, "D-nL": o.detected_mislocalized,
            "nD-L": o.undetected_localized, "nD-nL": o.undetected_mislocalized,
            "characterization_failures": o.characterization_failures,
            "errors": o.errors})
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    out = manifest.out_dir / "campaign.json"
    with open(out, "w") as fh:
        json.dump({"base_seed": result.base_seed,
                   "runs_per_scenario": result.runs_per_scenario,
                   "outcomes": rows}, fh, indent=2)
        fh.write("\n")
    print(f"campaign results written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmufdl",
        description="State-estimation fault detection and localization for "
                    "radial MV grids with sparse PMUs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("place", help="solve the optimal PMU placement")
    _add_common(p)
    p.add_argument("--cost", choices=("uniform", "resolution"),
                   default="uniform")
    p.add_argument("--forced-split", default=None,
                   help="comma-separated fork node ids to split at")
    p.add_argument("--save", default=None,
                   help="write the placement JSON under --out")
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("clusters", help="report the fault-cluster partition")
    _add_common(p)
    p.add_argument("--verify", action="store_true",
                   help="cross-check with the empirical residual oracle")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--colors", action="store_true",
                   help="emit a per-branch color index for plotting")
    p.set_defaults(func=cmd_clusters)

    p = sub.add_parser("check-observability",
                       help="check observability of the monitored grid")
    _add_common(p)
    p.set_defaults(func=cmd_check_observability)

    p = sub.add_parser("simulate",
                       help="synthesize measurement streams for scenarios")
    _add_common(p)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--post-samples", type=int, default=25,
                   help="samples to keep after the fault onset")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run-fdla",
                       help="run detection/localization over a stream CSV")
    _add_common(p)
    p.add_argument("--stream", required=True)
    p.set_defaults(func=cmd_run_fdla)

    p = sub.add_parser("campaign", help="Monte Carlo campaign over scenarios")
    _add_common(p)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--runs", type=int, default=100)
    p.set_defaults(func=cmd_campaign)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GridFileError, FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (ObservabilityError, InfeasiblePlacementError,
            SimulationError, GridModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
