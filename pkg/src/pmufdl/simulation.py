"""Ground-truth fault simulation, measurement synthesis, Monte Carlo runs.

Loads and generators are linear elements (constant impedance, EMF behind
internal impedance), so a faulted network is solved exactly as one nodal
system: the faulted branch is split at the fault position and the fault
admittance is attached to the new node.  Measurements are the node voltage
phasors and the external injection currents at monitored nodes, with
Gaussian polar noise applied per channel.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .grid import (
    GridModel, GridModelError, build_admittance, source_injections,
    extend_with_virtual_node, virtual_node_id, add_fake_nodes, NPHASES,
)
from .estimation import MeasurementStream, pack_measurements
from .fdla import FaultDetector, FdlaConfig, FdlaReport, posthoc_cluster_from_traces
from .noise import NoiseParams, apply_polar_noise
from .observability import compute_clusters, single_line_ufcs
from .estimation import EstimatorBank

FAULT_TYPES = ("three_phase", "two_phase", "one_phase_g", "one_phase_p")

#: Petersen coils are tuned slightly over the network zero-sequence
#: capacitance; exact resonance would null the residual fault current.
PETERSEN_OVERCOMPENSATION = 1.25

#: KCL mismatch above this relative level fails the steady-state solve.
KCL_RTOL = 1e-9


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FaultScenario:
    branch: int
    position: float
    fault_type: str
    fault_resistance: float = 100.0
    fault_time: float = 0.5
    duration: float | None = None

    def __post_init__(self):
        if not 0.0 < self.position < 1.0:
            raise ValueError("fault position must be inside (0, 1)")
        if self.fault_type not in FAULT_TYPES:
            raise ValueError(f"unknown fault type {self.fault_type!r}")
        if self.fault_resistance <= 0:
            raise ValueError("fault resistance must be positive")

    @property
    def label(self) -> str:
        return (f"{self.fault_type} at {self.position:.0%} of branch "
                f"{self.branch}")

    def expected_phases(self) -> frozenset[str]:
        return {
            "three_phase": frozenset("ABC"),
            "two_phase": frozenset("AB"),
            "one_phase_g": frozenset("A"),
            "one_phase_p": frozenset("A"),
        }[self.fault_type]


def fault_admittance_block(scenario: FaultScenario) -> np.ndarray:
    """3x3 admittance of the fault element at the fault node.

    Every fault connects the involved phases through one fault resistance
    per phase to a common point: grounded for three_phase and one_phase
    faults, floating for two_phase (so the A-B path carries 2 R_f and no
    ground current flows).  The single-phase return path closes through
    whatever neutral grounding the grid carries.
    """
    y = 1.0 / scenario.fault_resistance
    block = np.zeros((NPHASES, NPHASES), dtype=complex)
    if scenario.fault_type == "three_phase":
        block[np.diag_indices(3)] = y
    elif scenario.fault_type == "two_phase":
        yp = y / 2.0  # per-phase resistances in series between A and B
        block[0, 0] += yp
        block[1, 1] += yp
        block[0, 1] -= yp
        block[1, 0] -= yp
    else:
        block[0, 0] = y
    return block


def zero_sequence_capacitance(grid: GridModel) -> float:
    """Total zero-sequence shunt capacitance of all branch shunt ends."""
    omega = grid.omega
    total = 0.0
    for b in grid.branches:
        for shunt in (b.shunt_from, b.shunt_to):
            y0 = np.sum(shunt) / 3.0
            total += float(y0.imag) / omega
    return total


def tuned_petersen_inductance(
    grid: GridModel, overcompensation: float = PETERSEN_OVERCOMPENSATION
) -> float:
    """Coil inductance resonating with the network zero-sequence capacitance,
    L = 1 / (3 w^2 C0), shared equally among the grounded nodes."""
    c0 = zero_sequence_capacitance(grid)
    if c0 <= 0:
        raise SimulationError(
            "grid has no zero-sequence shunt capacitance to tune against")
    n_paths = max(len(grid.grounded_node_ids()), 1)
    base = 1.0 / (3.0 * grid.omega**2 * c0 * overcompensation)
    return base * n_paths


def grid_for_scenario(grid: GridModel, scenario: FaultScenario) -> GridModel:
    """Grounding variant the scenario runs on: Petersen for one_phase_p
    (validated), solid otherwise (grids without grounding stay unchanged)."""
    if scenario.fault_type == "one_phase_p":
        grounded = grid.grounded_node_ids()
        if not grounded:
            raise SimulationError(
                "one_phase_p fault needs a grid with a grounded neutral")
        kinds = {grid.node(i).grounding.kind for i in grounded}
        if kinds == {"petersen"}:
            return grid
        return grid.with_grounding("petersen", tuned_petersen_inductance(grid))
    if grid.grounded_node_ids():
        kinds = {grid.node(i).grounding.kind for i in grid.grounded_node_ids()}
        if kinds != {"solid"}:
            return grid.with_grounding("solid")
    return grid


@dataclass(frozen=True)
class SteadyStateSolution:
    """Exact phasors of one operating state (possibly faulted)."""

    grid: GridModel
    voltages: np.ndarray      # (n, 3) complex, node-id order
    injections: np.ndarray    # (n, 3) complex external nodal injections
    fault: FaultScenario | None = None
    fault_node: int | None = None

    def voltage_at(self, node_id: int) -> np.ndarray:
        return self.voltages[node_id - 1]

    def measurement_truth(self, monitored: Sequence[int]) -> np.ndarray:
        mon = sorted(monitored)
        v = np.stack([self.voltages[i - 1] for i in mon])
        i = np.stack([self.injections[i - 1] for i in mon])
        return pack_measurements(v, i)


def solve_steady_state(
    grid: GridModel, fault: FaultScenario | None = None
) -> SteadyStateSolution:
    """Solve the nodal equations of the (optionally faulted) network.

    The returned injections are the external nodal injections of the full
    linear model (nonzero only at source nodes); they are what the PMUs
    report as current measurements.  A KCL verification against the element
    currents guards the assembly.
    """
    if not grid.sources:
        raise SimulationError("grid has no sources; nothing drives the network")
    work = grid
    fault_node = None
    if fault is not None:
        work = extend_with_virtual_node(grid, fault.branch, fault.position)
        fault_node = virtual_node_id(work)
    Y = build_admittance(work).matrix.copy()
    J = source_injections(work)
    if fault is not None:
        s = slice(3 * (fault_node - 1), 3 * (fault_node - 1) + 3)
        Y[s, s] += fault_admittance_block(fault)
    try:
        V = np.linalg.solve(Y, J)
    except np.linalg.LinAlgError:
        raise SimulationError(
            "singular network equations (isolated subnetwork?)") from None
    mismatch = np.abs(Y @ V - J).max()
    scale = max(np.abs(J).max(), np.abs(V).max() * np.abs(Y).max())
    if scale > 0 and mismatch > KCL_RTOL * scale:
        raise SimulationError(f"KCL residual {mismatch:.3e} exceeds tolerance")
    n = work.n_nodes
    voltages = V.reshape(n, 3)
    injections = J.reshape(n, 3).copy()
    return SteadyStateSolution(grid=work, voltages=voltages,
                               injections=injections, fault=fault,
                               fault_node=fault_node)


# ---------------------------------------------------------------------------
# truth series and noisy streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruthSeries:
    """Per-sample exact phasors: a pre-fault state stepping into a faulted
    state at the fault sample."""

    times: np.ndarray
    pre: SteadyStateSolution
    post: SteadyStateSolution | None
    fault_sample: int | None
    clear_sample: int | None = None

    def solution_at(self, sample: int) -> SteadyStateSolution:
        if self.post is None or self.fault_sample is None:
            return self.pre
        if sample < self.fault_sample:
            return self.pre
        if self.clear_sample is not None and sample >= self.clear_sample:
            return self.pre
        return self.post

    def __len__(self) -> int:
        return self.times.size


def make_truth_series(
    grid: GridModel,
    scenario: FaultScenario | None,
    n_samples: int,
    sample_period: float = 0.02,
) -> TruthSeries:
    """Two steady-state solves stitched into a sampled time series."""
    times = np.arange(n_samples) * sample_period
    if scenario is None:
        return TruthSeries(times=times, pre=solve_steady_state(grid),
                           post=None, fault_sample=None)
    work = grid_for_scenario(grid, scenario)
    pre = solve_steady_state(work)
    post = solve_steady_state(work, scenario)
    fault_sample = int(np.ceil(scenario.fault_time / sample_period - 1e-12))
    clear = None
    if scenario.duration is not None:
        clear = int(np.ceil(
            (scenario.fault_time + scenario.duration) / sample_period - 1e-12))
    return TruthSeries(times=times, pre=pre, post=post,
                       fault_sample=fault_sample, clear_sample=clear)


def synthesize_measurements(
    truth: TruthSeries,
    noise: NoiseParams,
    monitored: Iterable[int],
    seed: int | np.random.SeedSequence = 0,
) -> MeasurementStream:
    """Noisy PMU stream for a truth series.

    Per sample, independent Gaussian draws perturb magnitude (fractionally)
    and phase of every monitored phasor; the draw order is fixed (voltages
    then currents, nodes ascending), so a seed fully determines the stream.
    """
    mon = tuple(sorted(monitored))
    rng = np.random.default_rng(seed)
    v_nom = noise.nominal_voltage_v
    if v_nom is None:
        base = truth.pre.grid
        mags = [np.abs(src.emf).mean() for src in base.sources]
        v_nom = float(np.mean(mags)) if mags else 1.0
    rows = []
    for k in range(len(truth)):
        sol = truth.solution_at(k)
        v = np.stack([sol.voltages[i - 1] for i in mon])
        i = np.stack([sol.injections[i - 1] for i in mon])
        v_noisy = apply_polar_noise(v, noise.sigma_v_mag, noise.sigma_v_phase,
                                    v_nom, rng)
        i_noisy = apply_polar_noise(i, noise.sigma_i_mag, noise.sigma_i_phase,
                                    noise.nominal_current_a, rng)
        rows.append(pack_measurements(v_noisy, i_noisy))
    return MeasurementStream(times=truth.times.copy(), z=np.array(rows),
                             monitored=mon)


# ---------------------------------------------------------------------------
# stream CSV format (long form: one row per node and phase)
# ---------------------------------------------------------------------------

STREAM_HEADER = ["timestamp", "node_id", "phase", "V_re", "V_im", "I_re", "I_im"]


def stream_to_csv(stream: MeasurementStream, path: str | Path) -> None:
    from .estimation import unpack_measurements

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STREAM_HEADER)
        for k, t in enumerate(stream.times):
            v, i = unpack_measurements(stream.z[k])
            for row, node in enumerate(stream.monitored):
                for ph in range(NPHASES):
                    writer.writerow([
                        f"{t:.6f}", node, "ABC"[ph],
                        repr(float(v[row, ph].real)), repr(float(v[row, ph].imag)),
                        repr(float(i[row, ph].real)), repr(float(i[row, ph].imag))])


def stream_from_csv(path: str | Path) -> MeasurementStream:
    by_time: dict[float, dict[tuple[int, int], tuple] ] = {}
    nodes: set[int] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != STREAM_HEADER:
            raise ValueError(
                f"unexpected stream header {header}; expected {STREAM_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            try:
                t = float(row[0])
                node = int(row[1])
                ph = "ABC".index(row[2])
                vals = tuple(float(x) for x in row[3:7])
            except (ValueError, IndexError):
                raise ValueError(f"{path}: malformed row at line {lineno}") from None
            by_time.setdefault(t, {})[(node, ph)] = vals
            nodes.add(node)
    mon = tuple(sorted(nodes))
    times = np.array(sorted(by_time))
    Z = np.full((times.size, 12 * len(mon)), np.nan)
    for k, t in enumerate(times):
        v = np.full((len(mon), 3), np.nan, dtype=complex)
        i = np.full((len(mon), 3), np.nan, dtype=complex)
        for (node, ph), (vr, vi, ir, ii) in by_time[t].items():
            r = mon.index(node)
            v[r, ph] = vr + 1j * vi
            i[r, ph] = ir + 1j * ii
        Z[k] = pack_measurements(v, i)
    return MeasurementStream(times=times, z=Z, monitored=mon)


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

def load_scenarios(path: str | Path) -> list[FaultScenario]:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "SCENARIOS" not in doc:
        raise ValueError(f"{path}: scenario file needs a SCENARIOS section")
    out = []
    for k, item in enumerate(doc["SCENARIOS"]):
        try:
            out.append(FaultScenario(
                branch=int(item["branch"]),
                position=float(item["position"]),
                fault_type=str(item["type"]),
                fault_resistance=float(item.get("resistance", 100.0)),
                fault_time=float(item.get("fault_time", 0.5)),
                duration=(float(item["duration"])
                          if item.get("duration") is not None else None)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: SCENARIOS[{k}]: {exc}") from exc
    return out


def save_scenarios(scenarios: Sequence[FaultScenario], path: str | Path) -> None:
    doc = {"SCENARIOS": [
        {"branch": s.branch, "position": s.position, "type": s.fault_type,
         "resistance": s.fault_resistance, "fault_time": s.fault_time,
         **({"duration": s.duration} if s.duration is not None else {})}
        for s in scenarios]}
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


# ---------------------------------------------------------------------------
# Monte Carlo campaign
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioOutcome:
    scenario: FaultScenario
    runs: int
    detected_localized: int
    detected_mislocalized: int
    undetected_localized: int
    undetected_mislocalized: int
    characterization_failures: int
    errors: int = 0

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return (self.detected_localized, self.detected_mislocalized,
                self.undetected_localized, self.undetected_mislocalized)


@dataclass(frozen=True)
class CampaignResult:
    outcomes: tuple[ScenarioOutcome, ...]
    base_seed: int
    runs_per_scenario: int


def _expected_fault_type_ok(scenario: FaultScenario, ft) -> bool:
    if ft is None or ft.indeterminate:
        return False
    if ft.phases != scenario.expected_phases():
        return False
    if scenario.fault_type == "two_phase" and ft.grounded:
        return False
    if scenario.fault_type in ("one_phase_g", "one_phase_p") and not ft.grounded:
        return False
    return True


def run_campaign(
    grid: GridModel,
    scenarios: Sequence[FaultScenario],
    runs_per_scenario: int = 100,
    base_seed: int = 0,
    monitored: Iterable[int] | None = None,
    noise: NoiseParams | None = None,
    config: FdlaConfig | None = None,
    pre_samples: int | None = None,
    post_samples: int = 25,
) -> CampaignResult:
    """Monte Carlo classification of detection and localization.

    Per run: synthesize a noisy stream, run the detector, classify as
    detected/localized (reported cluster holds the faulted branch),
    detected/mislocalized, undetected/localized (post-hoc argmin correct)
    or undetected/mislocalized.  Characterization is tallied separately
    over the detected runs.  Seeds derive deterministically from
    ``base_seed`` per scenario and run.
    """
    noise = noise or NoiseParams()
    cfg = config or FdlaConfig()
    mon = tuple(sorted(monitored)) if monitored is not None else grid.monitored_ids
    outcomes = []
    for s_idx, scenario in enumerate(scenarios):
        work = grid_for_scenario(grid, scenario)
        fault_sample = int(np.ceil(
            scenario.fault_time / noise.sample_period - 1e-12))
        if fault_sample < cfg.calibration_window:
            raise SimulationError(
                f"scenario {s_idx}: fault at sample {fault_sample} leaves "
                f"fewer than calibration_window={cfg.calibration_window} "
                "pre-fault samples")
        n_samples = fault_sample + post_samples
        if pre_samples is not None:
            n_samples = max(n_samples, pre_samples + post_samples)
        truth = make_truth_series(work, scenario, n_samples,
                                  noise.sample_period)

        partition = compute_clusters(work, mon)
        feg, registry = add_fake_nodes(work, single_line_ufcs(work, mon))
        operating_point = truth.pre.measurement_truth(mon)
        bank = EstimatorBank(work, partition, feg, registry, mon, noise,
                             operating_point)
        detector = FaultDetector(bank, cfg)
        true_cluster = partition.eligible_label_of(scenario.branch)

        dl = dnl = ndl = ndnl = char_fail = errors = 0
        for run in range(runs_per_scenario):
            seed = np.random.SeedSequence(
                entropy=base_seed, spawn_key=(s_idx, run))
            try:
                stream = synthesize_measurements(truth, noise, mon, seed)
                report = detector.process(stream)
            except Exception:
                errors += 1
                ndnl += 1
                continue
            if report.detected:
                if report.cluster_label == true_cluster:
                    dl += 1
                else:
                    dnl += 1
                if not _expected_fault_type_ok(scenario, report.fault_type):
                    char_fail += 1
            else:
                label = posthoc_cluster_from_traces(
                    report.wmr_traces, truth.fault_sample, cfg.mean_window,
                    bank.cluster_labels)
                if label == true_cluster:
                    ndl += 1
                else:
                    ndnl += 1
        outcomes.append(ScenarioOutcome(
            scenario=scenario, runs=runs_per_scenario,
            detected_localized=dl, detected_mislocalized=dnl,
            undetected_localized=ndl, undetected_mislocalized=ndnl,
            characterization_failures=char_fail, errors=errors))
    return CampaignResult(outcomes=tuple(outcomes), base_seed=base_seed,
                          runs_per_scenario=runs_per_scenario)
