"""Steady-state fault solves, noise synthesis, streams and campaigns."""
import numpy as np
import pytest

from pmufdl.grid import Branch, GridModel, Grounding, Load, Node, Source
from pmufdl.noise import NoiseParams
from pmufdl.simulation import (
    FaultScenario, SimulationError, grid_for_scenario, load_scenarios,
    make_truth_series, run_campaign, save_scenarios, solve_steady_state,
    stream_from_csv, stream_to_csv, synthesize_measurements,
    tuned_petersen_inductance, zero_sequence_capacitance,
)

from conftest import make_grid


def test_two_node_voltage_divider():
    """Source behind Z_s feeding one grounded-wye-equivalent load: per phase
    V2 = E * Z_l / (Z_s + Z_line + Z_l) when everything is decoupled."""
    e = 1000.0
    z_src = 2.0 + 1.0j
    z_line = 1.0 + 3.0j
    z_load = 50.0 + 10.0j
    nodes = (Node(id=1, monitored=True, grounding=Grounding("solid")),
             Node(id=2, monitored=True))
    branch = Branch(id=1, from_node=1, to_node=2,
                    series_impedance=z_line * np.eye(3))
    # a balanced delta of 3*z_load behaves per-phase like z_load to ground
    load = Load(node=2, delta_impedance=3.0 * z_load * np.array(
        [[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=complex))
    # balanced three-phase EMF sees the delta as z_load per phase
    src2 = Source(node=1, emf=e * np.exp(1j * np.deg2rad([0, -120, 120])),
                  internal_impedance=z_src * np.eye(3))
    grid2 = GridModel(nodes=nodes, branches=(branch,), sources=(src2,),
                      loads=(load,))
    sol2 = solve_steady_state(grid2)
    expected = src2.emf * z_load / (z_src + z_line + z_load)
    assert np.allclose(sol2.voltage_at(2), expected, rtol=1e-9)


def test_bolted_fault_pulls_voltage_to_zero(benchmark):
    sc = FaultScenario(branch=10, position=0.5, fault_type="three_phase",
                       fault_resistance=1e-6)
    sol = solve_steady_state(benchmark, sc)
    vf = np.abs(sol.voltage_at(sol.fault_node))
    assert vf.max() < 1e-3 * 11547.0


def test_kcl_balance_from_element_currents(benchmark):
    """Independent nodal balance: per node, branch flows plus shunt, load,
    grounding and source currents must cancel."""
    from pmufdl.grid import build_admittance, source_injections
    sol = solve_steady_state(benchmark)
    V = sol.voltages.reshape(-1)
    Y = build_admittance(benchmark).matrix
    J = source_injections(benchmark)
    mismatch = Y @ V - J
    assert np.abs(mismatch).max() < 1e-9 * np.abs(J).max()
    # spot-check one node against hand-assembled branch flows
    node = 8
    inj = np.zeros(3, dtype=complex)
    for b in benchmark.branches_at(node):
        other = b.to_node if b.from_node == node else b.from_node
        y = np.linalg.inv(b.series_impedance)
        inj += y @ (sol.voltage_at(node) - sol.voltage_at(other))
        shunt = b.shunt_from if b.from_node == node else b.shunt_to
        inj += shunt @ sol.voltage_at(node)
    for load in benchmark.loads:
        if load.node == node:
            inj += load.admittance_block() @ sol.voltage_at(node)
    assert np.abs(inj).max() < 1e-9 * np.abs(V).max()


def test_petersen_suppresses_ground_fault_current(benchmark):
    sc_g = FaultScenario(branch=12, position=0.5, fault_type="one_phase_g")
    sol_solid = solve_steady_state(grid_for_scenario(benchmark, sc_g), sc_g)
    sc_p = FaultScenario(branch=12, position=0.5, fault_type="one_phase_p")
    pet = grid_for_scenario(benchmark, sc_p)
    sol_pet = solve_steady_state(pet, sc_p)

    def fault_current(sol, r_f):
        return np.abs(sol.voltage_at(sol.fault_node)[0]) / r_f

    assert fault_current(sol_pet, 100.0) < fault_current(sol_solid, 100.0)


def test_fault_current_ordering_on_petersen_grid(benchmark):
    pet = benchmark.with_grounding("petersen",
                                   tuned_petersen_inductance(benchmark))
    mags = {}
    for ftype in ("three_phase", "two_phase", "one_phase_p"):
        sc = FaultScenario(branch=10, position=0.5, fault_type=ftype)
        sol = solve_steady_state(pet, sc)
        vf = sol.voltage_at(sol.fault_node)
        y = 1.0 / sc.fault_resistance
        if ftype == "three_phase":
            i = np.abs(y * vf).max()
        elif ftype == "two_phase":
            i = np.abs(vf[0] - vf[1]) * y / 2.0  # per-phase R_f in series
        else:
            i = np.abs(y * vf[0])
        mags[ftype] = i
    assert mags["three_phase"] > mags["two_phase"] > mags["one_phase_p"]


def test_one_phase_p_requires_grounding():
    grid = make_grid([(1, 1, 2)], monitored=(1, 2), sources=(1,))
    sc = FaultScenario(branch=1, position=0.5, fault_type="one_phase_p")
    with pytest.raises(SimulationError, match="grounded neutral"):
        grid_for_scenario(grid, sc)


def test_petersen_tuning_rule(benchmark):
    c0 = zero_sequence_capacitance(benchmark)
    L = tuned_petersen_inductance(benchmark, overcompensation=1.0)
    omega = benchmark.omega
    n_paths = len(benchmark.grounded_node_ids())
    assert L * 3 * omega**2 * c0 / n_paths == pytest.approx(1.0)


# -- noise synthesis -------------------------------------------------------------

def test_zero_sigma_reproduces_truth(benchmark):
    truth = make_truth_series(benchmark, None, 10, 0.02)
    stream = synthesize_measurements(truth, NoiseParams().zero_noise(),
                                     benchmark.monitored_ids, seed=5)
    want = truth.pre.measurement_truth(benchmark.monitored_ids)
    assert np.array_equal(stream.z, np.tile(want, (10, 1)))


def test_noise_statistics_match_sigmas():
    grid = make_grid([(1, 1, 2)], monitored=(1, 2), sources=(1,), loads=(2,))
    truth = make_truth_series(grid, None, 10_000, 0.02)
    noise = NoiseParams(sigma_v_mag=0.01, sigma_v_phase=0.002)
    stream = synthesize_measurements(truth, noise, (1, 2), seed=77)
    from pmufdl.estimation import unpack_measurements
    v_true = truth.pre.voltage_at(1)[0]
    vs = np.array([unpack_measurements(stream.z[k])[0][0, 0]
                   for k in range(len(stream))])
    mag_rel = np.abs(vs) / np.abs(v_true) - 1.0
    phase_err = np.angle(vs) - np.angle(v_true)
    assert abs(np.std(mag_rel) - 0.01) < 0.05 * 0.01
    assert abs(np.std(phase_err) - 0.002) < 0.05 * 0.002


def test_default_noise_parameters():
    d = NoiseParams()
    assert d.sigma_v_mag == 1.6e-5
    assert d.sigma_i_mag == 4e-3
    assert d.sigma_v_phase == 5.1e-5
    assert d.sigma_i_phase == 5.8e-3
    assert d.sample_period == 0.02


def test_seed_determinism(benchmark):
    truth = make_truth_series(benchmark, FaultScenario(
        branch=10, position=0.5, fault_type="three_phase", fault_time=1.0),
        60, 0.02)
    a = synthesize_measurements(truth, NoiseParams(), benchmark.monitored_ids, 42)
    b = synthesize_measurements(truth, NoiseParams(), benchmark.monitored_ids, 42)
    c = synthesize_measurements(truth, NoiseParams(), benchmark.monitored_ids, 43)
    assert np.array_equal(a.z, b.z)
    assert not np.array_equal(a.z, c.z)


def test_truth_series_step_and_clear(benchmark):
    sc = FaultScenario(branch=10, position=0.5, fault_type="two_phase",
                       fault_time=0.1, duration=0.06)
    truth = make_truth_series(benchmark, sc, 12, 0.02)
    assert truth.fault_sample == 5
    assert truth.clear_sample == 8
    assert truth.solution_at(4) is truth.pre
    assert truth.solution_at(5) is truth.post
    assert truth.solution_at(8) is truth.pre


# -- stream files ------------------------------------------------------------------

def test_stream_csv_roundtrip(tmp_path, benchmark):
    truth = make_truth_series(benchmark, None, 4, 0.02)
    stream = synthesize_measurements(truth, NoiseParams(),
                                     benchmark.monitored_ids, seed=3)
    path = tmp_path / "stream.csv"
    stream_to_csv(stream, path)
    back = stream_from_csv(path)
    assert back.monitored == stream.monitored
    assert np.allclose(back.times, stream.times)
    assert np.array_equal(back.z, stream.z)


def test_stream_csv_rejects_garbage(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("timestamp,node_id,phase,V_re,V_im,I_re,I_im\n0.0,1,A,x,0,0,0\n")
    with pytest.raises(ValueError, match="line 2"):
        stream_from_csv(p)
    p.write_text("nope\n")
    with pytest.raises(ValueError, match="header"):
        stream_from_csv(p)


def test_scenario_file_roundtrip(tmp_path):
    scenarios = [
        FaultScenario(branch=7, position=0.5, fault_type="three_phase"),
        FaultScenario(branch=10, position=0.25, fault_type="one_phase_p",
                      fault_resistance=50.0, fault_time=1.0, duration=0.5),
    ]
    path = tmp_path / "sc.yaml"
    save_scenarios(scenarios, path)
    back = load_scenarios(path)
    assert back == scenarios


def test_scenario_file_validation(tmp_path):
    p = tmp_path / "sc.yaml"
    p.write_text("SCENARIOS:\n- {branch: 1, position: 1.5, type: three_phase}\n")
    with pytest.raises(ValueError, match="SCENARIOS\\[0\\]"):
        load_scenarios(p)
    p.write_text("[]\n")
    with pytest.raises(ValueError, match="SCENARIOS"):
        load_scenarios(p)


# -- campaign ------------------------------------------------------------------------

def test_campaign_noise_free_all_detected_localized(benchmark):
    scenarios = [
        FaultScenario(branch=7, position=0.5, fault_type="three_phase",
                      fault_time=1.0),
        FaultScenario(branch=12, position=0.75, fault_type="two_phase",
                      fault_time=1.0),
        FaultScenario(branch=10, position=0.25, fault_type="one_phase_p",
                      fault_time=1.0),
    ]
    result = run_campaign(benchmark, scenarios, runs_per_scenario=2,
                          base_seed=7, noise=NoiseParams().zero_noise())
    for o in result.outcomes:
        assert o.counts == (o.runs, 0, 0, 0)
        assert o.characterization_failures == 0


def test_campaign_seed_determinism(benchmark):
    scenarios = [FaultScenario(branch=13, position=0.5,
                               fault_type="two_phase", fault_time=1.0)]
    a = run_campaign(benchmark, scenarios, runs_per_scenario=5, base_seed=9)
    b = run_campaign(benchmark, scenarios, runs_per_scenario=5, base_seed=9)
    assert a.outcomes == b.outcomes


def test_campaign_rejects_late_calibration(benchmark):
    sc = FaultScenario(branch=7, position=0.5, fault_type="three_phase",
                       fault_time=0.5)  # sample 25 < calibration window
    with pytest.raises(SimulationError, match="calibration"):
        run_campaign(benchmark, [sc], runs_per_scenario=1)
