"""Fault detection, localization and characterization from the WLS bank.

Per measurement sample the bank returns the plain-grid residual w0 and one
residual per fault cluster.  A fault is detected when the first difference
of w0 crosses a threshold calibrated on pre-fault data; the faulted cluster
minimizes the residual variation against its pre-fault running mean; the
faulted phases are read off the estimated current injections at the virtual
node of the selected hypothesis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimation import EstimatorBank, MeasurementStream
from .observability import ClusterPartition

#: Detection threshold floor when pre-fault residuals are constant.
THRESHOLD_EPS = 1e-12

#: When no hypothesis residual rises by at least this fraction of the w0
#: jump, the residuals carry no localization information (the fault sits at
#: a free node that every hypothesis explains, e.g. exactly on a fake node)
#: and localization falls back to the estimated free-node injections.
DEGENERACY_FRACTION = 5e-3


@dataclass(frozen=True)
class FdlaConfig:
    threshold_factor: float = 1.2
    calibration_window: int = 50
    mean_window: int = 25
    phase_current_rel_threshold: float = 0.3
    phase_current_nsigma: float = 3.0
    ground_current_rel_threshold: float = 0.15
    characterization_window: int = 5

    def __post_init__(self):
        if self.threshold_factor <= 1.0:
            raise ValueError("threshold_factor must exceed 1")
        if self.calibration_window < 2 or self.mean_window < 2:
            raise ValueError("windows must span at least 2 samples")
        if self.characterization_window < 1:
            raise ValueError("characterization_window must be positive")


@dataclass(frozen=True)
class FaultType:
    """Characterization result: faulted phases and ground involvement."""

    phases: frozenset[str]
    grounded: bool
    indeterminate: bool = False

    def __str__(self) -> str:
        if self.indeterminate:
            return "indeterminate"
        names = "".join(sorted(self.phases))
        return f"{names}{'-g' if self.grounded else ''}"


@dataclass(frozen=True)
class FdlaReport:
    detected: bool
    detection_sample: int | None
    detection_time: float | None
    cluster_label: int | None
    cluster_branches: frozenset[int] | None
    fault_type: FaultType | None
    threshold: float
    times: np.ndarray
    wmr_traces: np.ndarray
    injection_trace: np.ndarray | None
    cluster_labels: tuple[int, ...]
    skipped_samples: tuple[int, ...] = ()


def calibrate_threshold(
    w0_history: Sequence[float],
    threshold_factor: float = 1.2,
    floor: float = THRESHOLD_EPS,
) -> float:
    """Threshold = factor * max |w0(t) - w0(t-1)| over the history, floored
    at a small epsilon so a constant (e.g. noise-free) history still yields
    a usable threshold."""
    w = np.asarray(w0_history, dtype=float)
    if w.size < 2:
        raise ValueError("need at least two pre-fault samples to calibrate")
    max_step = float(np.max(np.abs(np.diff(w))))
    return max(threshold_factor * max_step, floor)


def characterize_fault(
    injections: np.ndarray,
    sigma_phase: np.ndarray | float,
    sigma_sum: float | None = None,
    config: FdlaConfig | None = None,
) -> FaultType:
    """Classify faulted phases from estimated fault-current injections.

    A phase is faulted when its injection magnitude clears both a relative
    threshold against the largest phase and an absolute noise threshold.
    Ground involvement is declared when the three phase currents do not sum
    to zero beyond the noise (with a relative floor: ground current is a
    fraction of the fault current, never below it).
    """
    config = config or FdlaConfig()
    inj = np.asarray(injections, dtype=complex)
    sig = np.broadcast_to(np.asarray(sigma_phase, dtype=float), (3,))
    if sigma_sum is None:
        sigma_sum = float(np.sqrt(np.sum(sig**2)))
    mags = np.abs(inj)
    top = mags.max()
    # numeric floor keeps noise-free runs from tripping on rounding dust
    abs_floor = np.maximum(config.phase_current_nsigma * sig, 1e-9 * top)
    flagged = mags > np.maximum(config.phase_current_rel_threshold * top, abs_floor)
    if not flagged.any():
        return FaultType(phases=frozenset(), grounded=False, indeterminate=True)
    phases = frozenset(p for p, on in zip("ABC", flagged) if on)
    residual = np.abs(inj.sum())
    sum_floor = max(config.phase_current_nsigma * sigma_sum,
                    config.ground_current_rel_threshold * top,
                    1e-9 * top)
    return FaultType(phases=phases, grounded=bool(residual > sum_floor))


class FaultDetector:
    """Sequential detector over a measurement stream.

    The threshold is calibrated on the first ``calibration_window`` samples;
    detection is armed afterwards.  Running residual means stop updating at
    detection.  Samples containing NaNs are skipped and reported.
    """

    def __init__(self, bank: EstimatorBank, config: FdlaConfig | None = None):
        self.bank = bank
        self.config = config or FdlaConfig()

    def process(self, stream: MeasurementStream) -> FdlaReport:
        cfg = self.config
        T = len(stream)
        K = len(self.bank.hypotheses)
        traces = np.full((T, K + 1), np.nan)
        valid = ~np.isnan(stream.z).any(axis=1)
        if valid.any():
            traces[valid] = self.bank.wmr_traces(stream.z[valid])
        skipped = tuple(int(i) for i in np.flatnonzero(~valid))

        threshold = np.nan
        detected = False
        detection_sample: int | None = None
        mu = np.zeros(K)
        mean_buf: list[np.ndarray] = []
        w0_calib: list[float] = []
        last_w0: float | None = None
        alpha_index: int | None = None
        jump0 = 0.0

        for t in range(T):
            if not valid[t]:
                continue
            w = traces[t]
            if len(w0_calib) < cfg.calibration_window:
                w0_calib.append(w[0])
                if not detected and K:
                    mean_buf.append(w[1:])
                    mean_buf = mean_buf[-cfg.mean_window:]
                last_w0 = w[0]
                if len(w0_calib) == cfg.calibration_window:
                    threshold = calibrate_threshold(w0_calib, cfg.threshold_factor)
                continue
            if not detected:
                if last_w0 is not None and abs(w[0] - last_w0) > threshold:
                    detected = True
                    detection_sample = t
                    jump0 = abs(w[0] - last_w0)
                    mu = (np.mean(mean_buf, axis=0)
                          if mean_buf else np.zeros(K))
                    variation = w[1:] - mu
                    alpha_index = int(np.argmin(variation)) + 1
                else:
                    mean_buf.append(w[1:])
                    mean_buf = mean_buf[-cfg.mean_window:]
            last_w0 = w[0]

        cluster_label = None
        cluster_branches = None
        fault_type = None
        injection_trace = None
        if detected and alpha_index is not None:
            z_det = stream.z[detection_sample]
            if K and (traces[detection_sample, 1:] - mu).max() < \
                    DEGENERACY_FRACTION * jump0:
                # every hypothesis explains the data (fault at a free node):
                # relocalize at the dominant free-node injection
                est = self.bank.estimate(alpha_index, z_det)
                by_node = self.bank.free_node_injections(alpha_index, est.x_hat)
                n_star = max(by_node, key=lambda n: np.abs(by_node[n]).sum())
                label = self.bank.cluster_label_for_node(alpha_index, n_star)
                if label is not None:
                    alpha_index = list(self.bank.cluster_labels).index(label) + 1
            hyp = self.bank.hypotheses[alpha_index - 1]
            cluster_label = hyp.label
            cluster_branches = hyp.cluster_branches
            injection_trace = self._injection_trace(alpha_index, stream, valid)
            # average the injection estimate over the first post-detection
            # samples: the white per-sample noise shrinks by sqrt(k)
            window = injection_trace[detection_sample:
                                     detection_sample + cfg.characterization_window]
            window = window[~np.isnan(window).any(axis=1)]
            k = max(len(window), 1)
            inj = window.mean(axis=0) if len(window) else \
                self.bank.region_injection(
                    alpha_index, self.bank.estimate(alpha_index, z_det).x_hat)
            sigmas, sigma_sum = self.bank.region_injection_sigmas(alpha_index)
            fault_type = characterize_fault(
                inj, sigmas / np.sqrt(k), sigma_sum / np.sqrt(k), cfg)
        return FdlaReport(
            detected=detected,
            detection_sample=detection_sample,
            detection_time=(float(stream.times[detection_sample])
                            if detection_sample is not None else None),
            cluster_label=cluster_label,
            cluster_branches=cluster_branches,
            fault_type=fault_type,
            threshold=float(threshold) if np.isfinite(threshold) else np.nan,
            times=stream.times.copy(),
            wmr_traces=traces,
            injection_trace=injection_trace,
            cluster_labels=self.bank.cluster_labels,
            skipped_samples=skipped)

    def _injection_trace(self, index: int, stream: MeasurementStream,
                         valid: np.ndarray) -> np.ndarray:
        """Estimated fault-current injection phasors (regional total of the
        selected cluster) over the whole stream."""
        solver = self.bank.solver(index)
        rows = self.bank.region_injection_rows(index)
        trace = np.full((len(stream), 3), np.nan, dtype=complex)
        if valid.any():
            X, _ = solver.solve_many(stream.z[valid])
            vals = X @ rows.T
            trace[valid] = vals[:, :3] + 1j * vals[:, 3:]
        return trace

    def posthoc_cluster(self, stream: MeasurementStream, sample: int) -> int | None:
        """Localization label at a given sample regardless of detection."""
        K = len(self.bank.hypotheses)
        if K == 0:
            return None
        valid = ~np.isnan(stream.z).any(axis=1)
        traces = np.full((len(stream), K + 1), np.nan)
        if valid.any():
            traces[valid] = self.bank.wmr_traces(stream.z[valid])
        return posthoc_cluster_from_traces(
            traces, sample, self.config.mean_window, self.bank.cluster_labels)


def posthoc_cluster_from_traces(
    traces: np.ndarray,
    sample: int,
    mean_window: int,
    cluster_labels: Sequence[int],
) -> int | None:
    """Localization at ``sample`` from precomputed residual traces: argmin of
    the variation against the mean over the preceding ``mean_window``
    samples."""
    lo = max(0, sample - mean_window)
    window = traces[lo:sample, 1:]
    window = window[~np.isnan(window).any(axis=1)]
    mu = window.mean(axis=0) if window.size else np.zeros(traces.shape[1] - 1)
    w = traces[sample, 1:]
    if np.isnan(w).any():
        return None
    return int(cluster_labels[int(np.argmin(w - mu))])


def run_fdla(
    grid,
    stream: MeasurementStream,
    noise=None,
    config: FdlaConfig | None = None,
    monitored=None,
) -> tuple[FdlaReport, ClusterPartition]:
    """Wire partition, fake nodes, bank and detector for one stream.

    R is linearized at the mean of the first ``mean_window`` valid samples.
    """
    from .grid import add_fake_nodes
    from .observability import compute_clusters, single_line_ufcs

    cfg = config or FdlaConfig()
    mon = tuple(sorted(monitored)) if monitored is not None else grid.monitored_ids
    if mon != stream.monitored:
        raise ValueError(
            f"stream monitored set {stream.monitored} does not match "
            f"the grid's {mon}")
    partition = compute_clusters(grid, mon)
    feg, registry = add_fake_nodes(grid, single_line_ufcs(grid, mon))
    valid = ~np.isnan(stream.z).any(axis=1)
    head = stream.z[valid][:cfg.mean_window]
    operating_point = head.mean(axis=0) if head.size else None
    bank = EstimatorBank(grid, partition, feg, registry, mon, noise,
                         operating_point)
    report = FaultDetector(bank, cfg).process(stream)
    return report, partition
