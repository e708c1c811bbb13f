"""Fault detection, characterization and localization for radial MV grids
monitored by a reduced set of PMUs, plus observability-driven optimal PMU
placement."""

from .grid import (
    Admittance,
    Branch,
    FakeNodeRegistry,
    GridModel,
    GridModelError,
    Grounding,
    Load,
    Node,
    Source,
    add_fake_nodes,
    build_admittance,
    extend_with_virtual_node,
    source_injections,
    virtual_node_id,
)
from .gridio import (
    GridFileError,
    load_benchmark,
    load_grid,
    load_placement_monitored,
    save_grid,
    save_placement,
)
from .noise import NoiseParams
from .estimation import (
    EstimateResult,
    EstimatorBank,
    MeasurementModel,
    MeasurementStream,
    ObservabilityError,
    WlsSolver,
    build_measurement_model,
    compute_wmr,
    estimate_bank,
    pack_measurements,
    pack_state,
    unpack_measurements,
    unpack_state,
    wls_estimate,
)
from .observability import (
    Cluster,
    ClusterPartition,
    ConditionCheck,
    check_extended_observability,
    check_plain_observability,
    compute_clusters,
    empirical_cluster_oracle,
    rank_observability,
    single_line_ufcs,
)
from .placement import (
    InfeasiblePlacementError,
    PlacementProblem,
    PlacementSolution,
    build_problem,
    exhaustive_oracle,
    place,
    solve_placement,
)
from .fdla import (
    FaultDetector,
    FaultType,
    FdlaConfig,
    FdlaReport,
    calibrate_threshold,
    characterize_fault,
    run_fdla,
)
from .simulation import (
    CampaignResult,
    FaultScenario,
    ScenarioOutcome,
    SimulationError,
    SteadyStateSolution,
    TruthSeries,
    grid_for_scenario,
    load_scenarios,
    make_truth_series,
    run_campaign,
    save_scenarios,
    solve_steady_state,
    stream_from_csv,
    stream_to_csv,
    synthesize_measurements,
    tuned_petersen_inductance,
)

__version__ = "0.1.0"
