"""Detector calibration, detection/localization logic and characterization."""
import numpy as np
import pytest

from pmufdl.estimation import EstimatorBank, MeasurementStream
from pmufdl.fdla import (
    FaultDetector, FdlaConfig, calibrate_threshold, characterize_fault,
    run_fdla, THRESHOLD_EPS,
)
from pmufdl.grid import add_fake_nodes
from pmufdl.noise import NoiseParams
from pmufdl.observability import compute_clusters, single_line_ufcs
from pmufdl.simulation import (
    FaultScenario, grid_for_scenario, make_truth_series,
    synthesize_measurements,
)


def test_calibrate_threshold_example():
    assert calibrate_threshold([1.0, 1.1, 0.9, 1.0]) == pytest.approx(0.24)


def test_calibrate_threshold_floor():
    assert calibrate_threshold([0.0, 0.0, 0.0]) == THRESHOLD_EPS
    assert calibrate_threshold([5.0, 5.0]) == THRESHOLD_EPS


def test_calibrate_threshold_needs_history():
    with pytest.raises(ValueError):
        calibrate_threshold([1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        FdlaConfig(threshold_factor=0.9)
    with pytest.raises(ValueError):
        FdlaConfig(mean_window=1)


def test_characterize_single_phase_grounded():
    ft = characterize_fault(np.array([1000.0, 0.0, 0.0]), 1.0)
    assert ft.phases == frozenset("A")
    assert ft.grounded and not ft.indeterminate
    assert str(ft) == "A-g"


def test_characterize_phase_to_phase_ungrounded():
    inj = np.array([700.0, 700.0 * np.exp(1j * np.pi), 0.0])
    ft = characterize_fault(inj, 1.0)
    assert ft.phases == frozenset("AB")
    assert not ft.grounded
    assert str(ft) == "AB"


def test_characterize_below_noise_is_indeterminate():
    ft = characterize_fault(np.array([1.0, 0.5, 0.2]), 5.0)
    assert ft.indeterminate
    assert str(ft) == "indeterminate"


def _run(grid, scenario, noise, seed=1, n_samples=75, config=None):
    work = grid_for_scenario(grid, scenario) if scenario is not None else grid
    truth = make_truth_series(work, scenario, n_samples, 0.02)
    stream = synthesize_measurements(truth, noise, grid.monitored_ids, seed)
    report, part = run_fdla(work, stream, config=config)
    return report, truth


def test_noise_free_three_phase_detects_at_fault_sample(benchmark):
    sc = FaultScenario(branch=10, position=0.5, fault_type="three_phase",
                       fault_time=1.2)
    report, truth = _run(benchmark, sc, NoiseParams().zero_noise())
    assert report.detected
    assert report.detection_sample == truth.fault_sample
    assert 10 in report.cluster_branches
    assert report.fault_type.phases == frozenset("ABC")
    assert report.injection_trace is not None
    # the injection estimate jumps to the fault current at the fault sample
    pre = np.abs(report.injection_trace[truth.fault_sample - 1]).max()
    post = np.abs(report.injection_trace[truth.fault_sample]).max()
    assert post > 50.0 and pre < 1.0


def test_no_fault_noise_free_stays_quiet(benchmark):
    report, _ = _run(benchmark, None, NoiseParams().zero_noise())
    assert not report.detected
    assert report.cluster_label is None and report.fault_type is None
    assert np.nanmax(report.wmr_traces) < 1e-9


def test_no_fault_500_samples_zero_false_alarms(benchmark):
    """Pre-fault-conditions calibration: the threshold registered over a
    healthy record is never crossed within that record."""
    truth = make_truth_series(benchmark, None, 500, 0.02)
    stream = synthesize_measurements(truth, NoiseParams(),
                                     benchmark.monitored_ids, seed=11)
    mon = benchmark.monitored_ids
    part = compute_clusters(benchmark, mon)
    feg, reg = add_fake_nodes(benchmark, single_line_ufcs(benchmark, mon))
    bank = EstimatorBank(benchmark, part, feg, reg, mon, NoiseParams(),
                         stream.z[:25].mean(axis=0))
    w0 = bank.wmr_traces(stream.z)[:, 0]
    th = calibrate_threshold(w0)
    assert np.all(np.abs(np.diff(w0)) <= th)


def test_detection_jump_decreases_with_fault_resistance(benchmark):
    jumps = []
    for r_f in (10.0, 100.0, 1000.0):
        sc = FaultScenario(branch=11, position=0.5, fault_type="two_phase",
                           fault_resistance=r_f, fault_time=1.2)
        report, truth = _run(benchmark, sc, NoiseParams().zero_noise())
        t = truth.fault_sample
        jumps.append(report.wmr_traces[t, 0] - report.wmr_traces[t - 1, 0])
    assert jumps[0] > jumps[1] > jumps[2]


def test_nan_samples_are_skipped_and_flagged(benchmark):
    sc = FaultScenario(branch=10, position=0.5, fault_type="three_phase",
                       fault_time=1.2)
    work = grid_for_scenario(benchmark, sc)
    truth = make_truth_series(work, sc, 75, 0.02)
    stream = synthesize_measurements(truth, NoiseParams().zero_noise(),
                                     benchmark.monitored_ids, 1)
    z = stream.z.copy()
    z[10, 3] = np.nan
    broken = MeasurementStream(times=stream.times, z=z,
                               monitored=stream.monitored)
    report, _ = run_fdla(work, broken)
    assert report.skipped_samples == (10,)
    assert np.isnan(report.wmr_traces[10]).all()
    assert report.detected and report.detection_sample == truth.fault_sample


def test_degenerate_fault_at_fake_node_localizes(benchmark):
    # branch 7 joins two monitored nodes, so its midpoint carries a fake
    # node that every hypothesis explains; localization must fall back to
    # the free-node injections
    sc = FaultScenario(branch=7, position=0.5, fault_type="two_phase",
                       fault_time=1.2)
    report, truth = _run(benchmark, sc, NoiseParams().zero_noise())
    assert report.detected
    assert 7 in report.cluster_branches
    assert report.fault_type.phases == frozenset("AB")
    t = truth.fault_sample
    # all hypotheses explain the data: no residual rose with the 0-th
    assert report.wmr_traces[t, 1:].max() < 1e-6 * report.wmr_traces[t, 0]


def test_posthoc_cluster_matches_fault(benchmark):
    sc = FaultScenario(branch=14, position=0.4, fault_type="one_phase_g",
                       fault_time=1.2)
    work = grid_for_scenario(benchmark, sc)
    truth = make_truth_series(work, sc, 75, 0.02)
    stream = synthesize_measurements(truth, NoiseParams(),
                                     benchmark.monitored_ids, 3)
    mon = benchmark.monitored_ids
    part = compute_clusters(work, mon)
    feg, reg = add_fake_nodes(work, single_line_ufcs(work, mon))
    bank = EstimatorBank(work, part, feg, reg, mon, NoiseParams(),
                         truth.pre.measurement_truth(mon))
    detector = FaultDetector(bank)
    label = detector.posthoc_cluster(stream, truth.fault_sample)
    assert label == part.eligible_label_of(14)


def test_short_stream_never_detects(benchmark):
    truth = make_truth_series(benchmark, None, 10, 0.02)
    stream = synthesize_measurements(truth, NoiseParams(),
                                     benchmark.monitored_ids, 2)
    report, _ = run_fdla(benchmark, stream)
    assert not report.detected
    assert np.isnan(report.threshold)


def test_mean_window_freezes_at_detection(benchmark):
    # two faults in sequence: the report keeps the first detection
    sc = FaultScenario(branch=10, position=0.5, fault_type="three_phase",
                       fault_time=1.2, duration=0.1)
    report, truth = _run(benchmark, sc, NoiseParams().zero_noise(),
                         n_samples=80)
    assert report.detection_sample == truth.fault_sample
    assert 10 in report.cluster_branches
