"""Linear WLS state estimation from PMU phasor measurements.

State vector layout (length N = 6n): real parts of all node phase voltages
in ascending node id, then all imaginary parts.  Measurement vector layout
(length D = 12d): voltage block then current block; within each block real
triplets of the monitored nodes ascending, then imaginary triplets.

The current "measured" at a monitored node is the external nodal injection
of the full linear network model (the Norton-equivalent source current):
with Y the all-in admittance matrix, z_I rows satisfy z_I = (Y v) at the
monitored nodes.  Nodes without sources therefore measure zero injection,
which acts as a weighted zero-injection constraint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .grid import GridModel, build_admittance
from .noise import NoiseParams, rect_variances, VARIANCE_FLOOR

#: Relative singular-value cutoff for rank decisions.
RANK_RTOL = 1e-10

#: Normal-equation condition estimates above this mark the result suspect.
CONDITION_LIMIT = 1e12


class ObservabilityError(RuntimeError):
    """The measurement model does not determine the state."""


def state_size(grid: GridModel) -> int:
    return 6 * grid.n_nodes


def measurement_size(monitored: Sequence[int]) -> int:
    return 12 * len(monitored)


def script_current_matrix(Y: np.ndarray) -> np.ndarray:
    """Real 6n x 6n map from the stacked state to stacked nodal injections:
    [[Re Y, -Im Y], [Im Y, Re Y]].
    """
    G, B = Y.real, Y.imag
    return np.block([[G, -B], [B, G]])


def pack_state(voltages: np.ndarray) -> np.ndarray:
    """(n, 3) complex node voltages -> length-6n real state vector."""
    flat = np.asarray(voltages, dtype=complex).reshape(-1)
    return np.concatenate([flat.real, flat.imag])


def unpack_state(x: np.ndarray) -> np.ndarray:
    """Length-6n real state vector -> (n, 3) complex node voltages."""
    x = np.asarray(x, dtype=float)
    half = x.size // 2
    return (x[:half] + 1j * x[half:]).reshape(-1, 3)


def pack_measurements(v_mon: np.ndarray, i_mon: np.ndarray) -> np.ndarray:
    """(d, 3) complex voltages and currents of the monitored nodes -> z."""
    v = np.asarray(v_mon, dtype=complex).reshape(-1)
    i = np.asarray(i_mon, dtype=complex).reshape(-1)
    return np.concatenate([v.real, v.imag, i.real, i.imag])


def unpack_measurements(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """z -> ((d, 3) complex voltages, (d, 3) complex currents)."""
    z = np.asarray(z, dtype=float)
    d6 = z.size // 2
    zv, zi = z[:d6], z[d6:]
    half = d6 // 2
    v = (zv[:half] + 1j * zv[half:]).reshape(-1, 3)
    i = (zi[:half] + 1j * zi[half:]).reshape(-1, 3)
    return v, i


@dataclass(frozen=True)
class MeasurementModel:
    """H and diagonal R for a grid and a monitored-node set."""

    H: np.ndarray
    R_diag: np.ndarray
    monitored: tuple[int, ...]
    n_nodes: int
    fallback_channels: tuple[int, ...] = ()

    @property
    def D(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return self.H.shape[1]


def _nominal_voltage(grid: GridModel, noise: NoiseParams) -> float:
    if noise.nominal_voltage_v is not None:
        return noise.nominal_voltage_v
    mags = [np.abs(src.emf).mean() for src in grid.sources]
    if mags:
        return float(np.mean(mags))
    return 1.0


def build_measurement_model(
    grid: GridModel,
    monitored: Iterable[int] | None = None,
    noise: NoiseParams | None = None,
    operating_point: np.ndarray | None = None,
) -> MeasurementModel:
    """Assemble H (voltage selection block over current rows) and diagonal R.

    R comes from propagating the polar noise sigmas to rectangular
    coordinates at the operating point; without one, voltage channels
    linearize at the nominal voltage and current channels at the nominal
    current (both at angle zero).  Channels whose operating magnitude is
    numerically zero fall back to the nominal magnitude and are flagged.
    """
    noise = noise or NoiseParams()
    mon = tuple(sorted(monitored)) if monitored is not None else grid.monitored_ids
    if not mon:
        raise ObservabilityError("monitored set is empty")
    for i in mon:
        grid.node(i)
    n = grid.n_nodes
    d = len(mon)
    N = 6 * n

    # voltage selection rows
    HV = np.zeros((6 * d, N))
    for row, node_id in enumerate(mon):
        base = 3 * (node_id - 1)
        for ph in range(3):
            HV[3 * row + ph, base + ph] = 1.0              # real part
            HV[3 * d + 3 * row + ph, 3 * n + base + ph] = 1.0  # imaginary part

    # current rows: monitored-node rows of the script matrix
    Y = build_admittance(grid).matrix
    script = script_current_matrix(Y)
    re_rows = [3 * (node_id - 1) + ph for node_id in mon for ph in range(3)]
    im_rows = [3 * n + r for r in re_rows]
    HI = script[re_rows + im_rows, :]

    H = np.vstack([HV, HI])

    v_nom = _nominal_voltage(grid, noise)
    i_nom = noise.nominal_current_a
    if operating_point is not None:
        v_op, i_op = unpack_measurements(np.asarray(operating_point, dtype=float))
        if v_op.shape != (d, 3):
            raise ValueError("operating point length does not match the monitored set")
    else:
        v_op = np.full((d, 3), v_nom, dtype=complex)
        i_op = np.full((d, 3), i_nom, dtype=complex)

    vr, vi, v_fb = rect_variances(v_op.reshape(-1), noise.sigma_v_mag,
                                  noise.sigma_v_phase, v_nom)
    ir, ii, i_fb = rect_variances(i_op.reshape(-1), noise.sigma_i_mag,
                                  noise.sigma_i_phase, i_nom)
    R = np.concatenate([vr, vi, ir, ii])
    R = np.maximum(R, VARIANCE_FLOOR)
    fallback = np.concatenate([v_fb, v_fb, i_fb, i_fb])
    H.flags.writeable = False
    R.flags.writeable = False
    return MeasurementModel(
        H=H, R_diag=R, monitored=mon, n_nodes=n,
        fallback_channels=tuple(int(i) for i in np.flatnonzero(fallback)))


@dataclass(frozen=True)
class EstimateResult:
    x_hat: np.ndarray
    wmr: float
    hypothesis: int | None
    condition_ok: bool


def compute_wmr(model: MeasurementModel, z: np.ndarray, x_hat: np.ndarray) -> float:
    """Weighted measurement residual: e' R^-1 e with e = z - H x."""
    e = np.asarray(z, dtype=float) - model.H @ np.asarray(x_hat, dtype=float)
    return float(e @ (e / model.R_diag))


class WlsSolver:
    """QR-factored weighted least squares for one measurement model.

    The normal equations are never formed; the weighted design matrix is
    factored once and reused across measurement vectors.
    """

    def __init__(self, model: MeasurementModel, context: str = "grid"):
        self.model = model
        self.context = context
        w = 1.0 / np.sqrt(model.R_diag)
        A = model.H * w[:, None]
        sv = np.linalg.svd(A, compute_uv=False)
        rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size else 0
        if rank < model.N:
            raise ObservabilityError(
                f"{context}: measurement model is rank deficient "
                f"(rank {rank} < {model.N}); the grid is not observable "
                "with this monitored set")
        self.weights = w
        self.condition = float(sv[0] / sv[-1])
        self.condition_ok = self.condition**2 <= CONDITION_LIMIT
        self.Q, self.Rtri = np.linalg.qr(A)

    def solve(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        """Return (x_hat, wmr) for one measurement vector."""
        b = self.weights * np.asarray(z, dtype=float)
        x = np.linalg.solve(self.Rtri, self.Q.T @ b)
        r = b - (self.Q @ (self.Q.T @ b))
        return x, float(r @ r)

    def solve_many(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`solve` over rows of Z: returns (X, wmr)."""
        B = np.asarray(Z, dtype=float) * self.weights
        QtB = B @ self.Q
        X = np.linalg.solve(self.Rtri, QtB.T).T
        Res = B - QtB @ self.Q.T
        return X, np.einsum("ij,ij->i", Res, Res)

    def wmr_many(self, Z: np.ndarray) -> np.ndarray:
        """Residuals only, computed in the numerically stable form."""
        B = np.asarray(Z, dtype=float) * self.weights
        Res = B - (B @ self.Q) @ self.Q.T
        return np.einsum("ij,ij->i", Res, Res)

    def state_covariance_quadform(self, rows: np.ndarray) -> np.ndarray:
        """diag(rows @ Cov(x_hat) @ rows.T) for a stack of state-space rows."""
        V = np.linalg.solve(self.Rtri.T, np.asarray(rows, dtype=float).T)
        return np.einsum("ij,ij->j", V, V)


def wls_estimate(model: MeasurementModel, z: np.ndarray,
                 hypothesis: int | None = None) -> EstimateResult:
    """One-shot WLS estimate; see :class:`WlsSolver` for repeated solves."""
    solver = WlsSolver(model)
    x, wmr = solver.solve(z)
    return EstimateResult(x_hat=x, wmr=wmr, hypothesis=hypothesis,
                          condition_ok=solver.condition_ok)


# ---------------------------------------------------------------------------
# measurement streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementStream:
    """Time series of measurement vectors in the standard layout."""

    times: np.ndarray
    z: np.ndarray
    monitored: tuple[int, ...]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 2 or z.shape[0] != t.size:
            raise ValueError("stream shape mismatch")
        if z.shape[1] != measurement_size(self.monitored):
            raise ValueError("stream width does not match the monitored set")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "z", z)

    def __len__(self) -> int:
        return self.times.size


# ---------------------------------------------------------------------------
# the estimate bank
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hypothesis:
    """One fault hypothesis of the bank: a cluster and its extended grid."""

    label: int
    representative: int
    cluster_branches: frozenset[int]
    grid: GridModel
    virtual_node: int


class EstimatorBank:
    """Parallel WLS estimators: the plain grid plus one midpoint-virtual-node
    hypothesis per fault cluster, all sharing one R and measurement layout.

    Hypothesis grids are built on the fake-node extended grid; when a
    cluster representative was itself split by a fake node, the virtual node
    goes on the lower-id half branch.
    """

    def __init__(
        self,
        base_grid: GridModel,
        partition,
        feg: GridModel,
        registry,
        monitored: Iterable[int] | None = None,
        noise: NoiseParams | None = None,
        operating_point: np.ndarray | None = None,
    ):
        from .grid import extend_with_virtual_node, virtual_node_id

        self.base_grid = base_grid
        self.noise = noise or NoiseParams()
        mon = tuple(sorted(monitored)) if monitored is not None else base_grid.monitored_ids
        self.monitored = mon
        self.partition = partition
        self.registry = registry

        model0 = build_measurement_model(base_grid, mon, self.noise, operating_point)
        self.model0 = model0
        self.solver0 = WlsSolver(model0, context="base grid")

        self.hypotheses: list[Hypothesis] = []
        self._solvers: list[WlsSolver] = [self.solver0]
        self._models: list[MeasurementModel] = [model0]
        for label, cluster in enumerate(partition.eligible_clusters, start=1):
            rep = cluster.representative
            entry = registry.by_branch.get(rep) if registry is not None else None
            target = entry.half_from if entry is not None else rep
            hyp_grid = extend_with_virtual_node(feg, target, 0.5)
            hyp = Hypothesis(
                label=label, representative=rep,
                cluster_branches=cluster.branches, grid=hyp_grid,
                virtual_node=virtual_node_id(hyp_grid))
            model = build_measurement_model(hyp_grid, mon, self.noise, operating_point)
            if model.D <= model.N:
                # Square or underdetermined local systems leave no residual
                # information; flag rather than silently return zeros.
                pass
            solver = WlsSolver(model, context=f"hypothesis for cluster {label}")
            # share the exact same R across the whole bank
            self.hypotheses.append(hyp)
            self._models.append(model)
            self._solvers.append(solver)

    @property
    def n_estimates(self) -> int:
        return len(self._solvers)

    @property
    def cluster_labels(self) -> tuple[int, ...]:
        return tuple(h.label for h in self.hypotheses)

    def wmrs(self, z: np.ndarray) -> np.ndarray:
        """[w0, w1, ..., wK] for one measurement vector."""
        return np.array([s.wmr_many(z[None, :])[0] for s in self._solvers])

    def wmr_traces(self, Z: np.ndarray) -> np.ndarray:
        """(T, 1 + K) residual traces for a whole stream."""
        return np.column_stack([s.wmr_many(Z) for s in self._solvers])

    def estimate(self, index: int, z: np.ndarray) -> EstimateResult:
        """Full estimate for bank entry ``index`` (0 is the plain grid)."""
        solver = self._solvers[index]
        x, wmr = solver.solve(z)
        hyp = None if index == 0 else self.hypotheses[index - 1].representative
        return EstimateResult(x_hat=x, wmr=wmr, hypothesis=hyp,
                              condition_ok=solver.condition_ok)

    def model(self, index: int) -> MeasurementModel:
        return self._models[index]

    def solver(self, index: int) -> WlsSolver:
        return self._solvers[index]

    def _script(self, index: int) -> np.ndarray:
        if not hasattr(self, "_script_cache"):
            self._script_cache: dict[int, np.ndarray] = {}
        if index not in self._script_cache:
            hyp = self.hypotheses[index - 1]
            Y = build_admittance(hyp.grid).matrix
            self._script_cache[index] = script_current_matrix(Y)
        return self._script_cache[index]

    def node_injection_rows(self, index: int, node_id: int) -> np.ndarray:
        """Six script-matrix rows (real parts then imaginary parts) giving a
        node's external injection as a function of the hypothesis state."""
        if index == 0:
            raise ValueError("the plain-grid estimate carries no hypothesis")
        hyp = self.hypotheses[index - 1]
        script = self._script(index)
        n = hyp.grid.n_nodes
        base = 3 * (node_id - 1)
        rows = [base + ph for ph in range(3)] + [3 * n + base + ph for ph in range(3)]
        return script[rows, :]

    def virtual_injection_rows(self, index: int) -> np.ndarray:
        return self.node_injection_rows(index, self.hypotheses[index - 1].virtual_node)

    def node_injection(self, index: int, x_hat: np.ndarray,
                       node_id: int | None = None) -> np.ndarray:
        """Estimated three-phase complex current absorbed at a node of the
        hypothesis grid (default: its virtual node)."""
        if node_id is None:
            node_id = self.hypotheses[index - 1].virtual_node
        rows = self.node_injection_rows(index, node_id)
        vals = rows @ np.asarray(x_hat, dtype=float)
        return vals[:3] + 1j * vals[3:]

    def virtual_injection(self, index: int, x_hat: np.ndarray) -> np.ndarray:
        return self.node_injection(index, x_hat)

    def free_node_injections(self, index: int, x_hat: np.ndarray
                             ) -> dict[int, np.ndarray]:
        """Estimated injections at every non-monitored node of a hypothesis.

        These are the degrees of freedom of the estimate; a fault shows up
        as a concentrated injection at the free node(s) nearest to it.
        """
        hyp = self.hypotheses[index - 1]
        mon = set(self.monitored)
        return {
            nd.id: self.node_injection(index, x_hat, nd.id)
            for nd in hyp.grid.nodes if nd.id not in mon}

    def cluster_label_for_node(self, index: int, node_id: int) -> int | None:
        """Cluster label a free node of a hypothesis grid points at: the
        hypothesis's own cluster for its virtual node, the split branch's
        cluster for a fake node, the common cluster of the incident eligible
        branches for a real node (None when ambiguous, e.g. separators)."""
        hyp = self.hypotheses[index - 1]
        if node_id == hyp.virtual_node:
            return hyp.label
        if self.registry is not None and node_id in self.registry.by_fake_node:
            orig = self.registry.by_fake_node[node_id].original_branch
            return self.partition.eligible_label_of(orig)
        labels = {
            self.partition.eligible_label_of(b.id)
            for b in self.base_grid.branches_at(node_id)
            if b.fault_hypothesis_eligible}
        labels.discard(None)
        if len(labels) == 1:
            return labels.pop()
        return None

    def injection_noise_sigmas(self, index: int, node_id: int | None = None
                               ) -> tuple[np.ndarray, float]:
        """Per-phase injection magnitude noise scale and the scale of the
        three-phase sum, propagated from the state estimate covariance."""
        if node_id is None:
            node_id = self.hypotheses[index - 1].virtual_node
        return self._rows_sigmas(index, self.node_injection_rows(index, node_id))

    def _rows_sigmas(self, index: int, rows: np.ndarray
                     ) -> tuple[np.ndarray, float]:
        solver = self._solvers[index]
        variances = solver.state_covariance_quadform(rows)
        per_phase = np.sqrt(variances[:3] + variances[3:])
        sum_rows = np.vstack([rows[:3].sum(axis=0), rows[3:].sum(axis=0)])
        sum_var = solver.state_covariance_quadform(sum_rows)
        return per_phase, float(np.sqrt(sum_var.sum()))

    def region_nodes(self, index: int) -> tuple[int, ...]:
        """Free nodes of a hypothesis's cluster region: the virtual node,
        the cluster's fake nodes, and the non-monitored real nodes touching
        the cluster's branches (separators included)."""
        hyp = self.hypotheses[index - 1]
        mon = set(self.monitored)
        cluster_nodes: set[int] = set()
        for bid in hyp.cluster_branches:
            br = self.base_grid.branch(bid)
            cluster_nodes |= {br.from_node, br.to_node}
        out = []
        for nd in hyp.grid.nodes:
            if nd.id in mon:
                continue
            if nd.kind == "virtual":
                out.append(nd.id)
            elif nd.kind == "fake":
                entry = self.registry.by_fake_node.get(nd.id)
                if entry is not None and entry.original_branch in hyp.cluster_branches:
                    out.append(nd.id)
            elif nd.id in cluster_nodes:
                out.append(nd.id)
        return tuple(sorted(out))

    def region_injection_rows(self, index: int) -> np.ndarray:
        """Summed injection rows over the cluster region's free nodes.

        The regional total is the estimated fault current entering the
        region; summing makes the anti-correlated splitting of the current
        between neighboring free nodes cancel, so its noise floor is far
        lower than any single node's.
        """
        if not hasattr(self, "_region_rows_cache"):
            self._region_rows_cache: dict[int, np.ndarray] = {}
        if index not in self._region_rows_cache:
            rows = sum(self.node_injection_rows(index, nid)
                       for nid in self.region_nodes(index))
            self._region_rows_cache[index] = rows
        return self._region_rows_cache[index]

    def region_injection(self, index: int, x_hat: np.ndarray) -> np.ndarray:
        rows = self.region_injection_rows(index)
        vals = rows @ np.asarray(x_hat, dtype=float)
        return vals[:3] + 1j * vals[3:]

    def region_injection_sigmas(self, index: int) -> tuple[np.ndarray, float]:
        return self._rows_sigmas(index, self.region_injection_rows(index))


def estimate_bank(
    feg: GridModel,
    partition,
    base_grid: GridModel,
    monitored: Iterable[int] | None,
    noise: NoiseParams | None,
    z: np.ndarray,
    registry=None,
    operating_point: np.ndarray | None = None,
) -> list[EstimateResult]:
    """The 0-th estimate on the plain grid plus one per fault cluster."""
    bank = EstimatorBank(base_grid, partition, feg, registry, monitored,
                         noise, operating_point)
    return [bank.estimate(i, z) for i in range(bank.n_estimates)]
