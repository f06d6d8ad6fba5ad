"""Centralized MPC oracle and the receding-horizon simulation driver.

The oracle solves the finite-horizon problem directly over stacked (x, u)
with the dynamics as equality constraints.  It shares the small QP kernels
with the distributed path but none of the response-space machinery, which is
what makes it a genuine cross-check for the distributed solvers.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import admm as _admm
from . import consensus as _consensus
from .agents import SequentialScheduler, audit, new_access_logs
from .costs import QuadraticCost, constraint_matrix, terminal_equalities
from .kernels import (EqQpSolver, Polytope, QpInfeasibleError, QpSettings,
                      QpSolver)
from .problems import build_coupled_problems, build_geometry, build_local_problems
from .sls import HorizonSpec, reconstruct_trajectory
from .systems import SystemModel, build_interconnection_graph


class InfeasibleProblemError(RuntimeError):
    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


@dataclass(frozen=True)
class MpcProblem:
    """One finite-horizon instance: model, horizon, cost, constraints, x0."""

    model: SystemModel
    T: int
    cost: QuadraticCost
    templates: tuple = ()
    terminal: bool = False
    x0: np.ndarray = None
    tau: int = 0

    def horizon(self) -> HorizonSpec:
        return HorizonSpec(self.T, self.model.partition)


@dataclass
class CentralizedSolution:
    x: np.ndarray          # (T+1, n)
    u: np.ndarray          # (T, p)
    objective: float
    kkt_residual: float


def _dynamics_equalities(model: SystemModel, horizon: HorizonSpec,
                         x0: np.ndarray):
    """Rows pinning x_0 and the plant recursion over the stacked trajectory."""
    n, p, T = horizon.n, horizon.p, horizon.T
    dim = horizon.n_rows
    A_eq = np.zeros(((T + 1) * n, dim))
    b_eq = np.zeros((T + 1) * n)
    A_eq[:n, :n] = np.eye(n)
    b_eq[:n] = x0
    for t in range(T):
        r = (t + 1) * n
        A_eq[r:r + n, (t + 1) * n:(t + 2) * n] = np.eye(n)
        A_eq[r:r + n, t * n:(t + 1) * n] = -model.A
        A_eq[r:r + n, horizon.n_x_rows + t * p:horizon.n_x_rows + (t + 1) * p] = -model.B
    return A_eq, b_eq


def solve_centralized(mp: MpcProblem, qp_settings: QpSettings = None) -> CentralizedSolution:
    """Dense QP over (x, u); the optimality oracle for the distributed solvers."""
    horizon = mp.horizon()
    x0 = np.asarray(mp.x0, dtype=float)
    H, g = mp.cost.assemble(horizon)
    A_eq, b_eq = _dynamics_equalities(mp.model, horizon, x0)
    if mp.terminal:
        A_t, b_t = terminal_equalities(horizon, range(mp.model.partition.N))
        A_eq = np.vstack([A_eq, A_t])
        b_eq = np.concatenate([b_eq, b_t])
    G, h = constraint_matrix(mp.templates, horizon, mp.model.dt, mp.tau)
    try:
        if G.shape[0]:
            solver = QpSolver(H, Polytope(G=G, h=h, A_eq=A_eq, b_eq=b_eq),
                              qp_settings)
            z, _, _ = solver.solve(g, b_eq=b_eq)
        else:
            z = EqQpSolver(H, A_eq).solve(g, b_eq)
    except QpInfeasibleError as exc:
        raise InfeasibleProblemError(f"centralized MPC infeasible: {exc}") from exc
    kkt_res = float(np.max(np.abs(A_eq @ z - b_eq)))
    n, p, T = horizon.n, horizon.p, horizon.T
    x = z[:(T + 1) * n].reshape(T + 1, n)
    u = z[(T + 1) * n:].reshape(T, p) if p else np.zeros((T, 0))
    return CentralizedSolution(x=x, u=u, objective=mp.cost.value(x, u),
                               kkt_residual=kkt_res)


@dataclass
class StepStats:
    """Per-MPC-step solver bookkeeping for the run record."""

    tau: int
    solver: str
    iterations: int = 0
    inner_iterations: int = 0
    solve_ms: float = 0.0          # simulated-parallel (max over agents per round)
    wall_ms: float = 0.0
    msgs: int = 0
    bytes: int = 0
    objective: float = 0.0
    predicted_terminal_norm: float = 0.0
    primal: np.ndarray = None
    dual: np.ndarray = None
    achievability: np.ndarray = None
    consensus: list = None
    iter_ms: np.ndarray = None


@dataclass
class RunRecord:
    """Closed-loop trajectory with per-step stats and the run's audit report."""

    solver: str
    states: np.ndarray             # (steps+1, n)
    inputs: np.ndarray             # (steps, p)
    steps: list = field(default_factory=list)
    audit_report: object = None
    predicted: list = field(default_factory=list)   # (x, u) predictions per step


def closed_loop_cost(record: RunRecord, cost: QuadraticCost) -> float:
    """Sum of realized stage costs plus the final state's state-cost terms."""
    total = 0.0
    steps = record.inputs.shape[0]
    for t in range(steps):
        total += cost.stage_value(record.states[t], record.inputs[t])
    # the input terms vanish at zero, leaving the final state's cost
    total += cost.stage_value(record.states[steps],
                              np.zeros(record.inputs.shape[1]))
    return total


class CentralizedController:
    """Receding-horizon wrapper around the oracle."""

    name = "centralized"

    def __init__(self, model: SystemModel, T: int, cost: QuadraticCost,
                 templates=(), terminal: bool = False,
                 qp_settings: QpSettings = None):
        self.model = model
        self.T = T
        self.cost = cost
        self.templates = tuple(templates)
        self.terminal = terminal
        self.qp_settings = qp_settings

    def solve_step(self, x0: np.ndarray, tau: int):
        t0 = time.perf_counter()
        sol = solve_centralized(MpcProblem(
            model=self.model, T=self.T, cost=self.cost, templates=self.templates,
            terminal=self.terminal, x0=x0, tau=tau), self.qp_settings)
        ms = 1e3 * (time.perf_counter() - t0)
        stats = StepStats(tau=tau, solver=self.name, solve_ms=ms, wall_ms=ms,
                          objective=sol.objective,
                          predicted_terminal_norm=float(np.linalg.norm(sol.x[-1])))
        return sol.u[0], stats, (sol.x, sol.u)


class DistributedController:
    """Receding-horizon wrapper around Algorithm 1 or 2.

    Holds the geometry, the message harness, the access logs, and the warm
    state across MPC steps.  ``algorithm`` selects the separable row update
    ("admm") or the nested consensus loop ("consensus").
    """

    def __init__(self, model: SystemModel, d: int, T: int, cost: QuadraticCost,
                 templates=(), terminal: bool = False, algorithm: str = "admm",
                 admm_params: _admm.AdmmParams = None,
                 consensus_params: _consensus.ConsensusParams = None,
                 scheduler=None, qp_settings: QpSettings = None,
                 record_achievability: bool = True, record_inner: bool = False,
                 warm_start: bool = True):
        if algorithm not in ("admm", "consensus"):
            raise ValueError("algorithm must be 'admm' or 'consensus'")
        self.model = model
        self.d = d
        self.T = T
        self.cost = cost
        self.templates = tuple(templates)
        self.terminal = terminal
        self.algorithm = algorithm
        self.admm_params = admm_params or _admm.AdmmParams()
        self.consensus_params = consensus_params or _consensus.ConsensusParams()
        self.qp_settings = qp_settings
        self.record_achievability = record_achievability
        self.record_inner = record_inner
        self.warm_start = warm_start
        self.graph = build_interconnection_graph(model)
        self.logs = new_access_logs(model.partition.N)
        self.geometry = build_geometry(model, d, T, graph=self.graph,
                                       access_logs=self.logs)
        self.harness = _admm.Harness.build(self.graph, d,
                                           scheduler=scheduler or SequentialScheduler(),
                                           logs=self.logs)
        self._warm = None

    @property
    def name(self) -> str:
        return self.algorithm

    def solve_step(self, x0: np.ndarray, tau: int):
        t0 = time.perf_counter()
        _admm.broadcast_state(self.harness, self.geometry, x0)
        if self.algorithm == "admm":
            problems = build_local_problems(
                self.geometry, self.cost, self.templates, x0, tau=tau,
                terminal=self.terminal, qp_settings=self.qp_settings,
                access_logs=self.logs)
            result = _admm.solve(problems, self.geometry, self.admm_params,
                                 self.harness, warm_state=self._warm,
                                 record_achievability=self.record_achievability)
        else:
            problems = build_coupled_problems(
                self.geometry, self.cost, self.templates, x0, tau=tau,
                terminal=self.terminal, qp_settings=self.qp_settings,
                access_logs=self.logs)
            result = _consensus.solve_coupled(
                problems, self.geometry, self.admm_params, self.consensus_params,
                self.harness, warm_state=self._warm,
                record_achievability=self.record_achievability,
                record_inner=self.record_inner)
        wall_ms = 1e3 * (time.perf_counter() - t0)
        if self.warm_start:
            self._warm = result.warm_state
        x_pred, u_pred = reconstruct_trajectory(result.response, x0)
        st = result.stats
        stats = StepStats(
            tau=tau, solver=self.name, iterations=st.iterations,
            inner_iterations=int(st.inner_counts.sum()) if st.inner_counts is not None else 0,
            solve_ms=float(st.iter_ms.sum()), wall_ms=wall_ms,
            msgs=st.msgs_total, bytes=st.bytes_total,
            objective=self.cost.value(x_pred, u_pred),
            predicted_terminal_norm=float(np.linalg.norm(x_pred[-1])),
            primal=st.primal, dual=st.dual, achievability=st.achievability,
            consensus=st.consensus, iter_ms=st.iter_ms)
        return u_pred[0], stats, (x_pred, u_pred)

    def audit_report(self):
        return audit(self.logs, self.graph, self.d)


def receding_horizon(controller, plant: SystemModel, x0: np.ndarray, steps: int,
                     w: np.ndarray = None, keep_predictions: bool = False) -> RunRecord:
    """Apply first controls to the plant for ``steps`` real time steps.

    ``w`` is an optional (steps, n) disturbance sequence; the default is the
    nominal (zero) case.  A solver failure propagates after the record built
    so far is attached to the exception.
    """
    n, p = plant.partition.n, plant.partition.p
    states = np.zeros((steps + 1, n))
    inputs = np.zeros((steps, p))
    states[0] = np.asarray(x0, dtype=float)
    record = RunRecord(solver=getattr(controller, "name", "unknown"),
                       states=states, inputs=inputs)
    for t in range(steps):
        try:
            u0, stats, prediction = controller.solve_step(states[t], tau=t)
        except Exception as exc:
            record.states = states[:t + 1]
            record.inputs = inputs[:t]
            exc.partial_record = record
            raise
        inputs[t] = u0
        record.steps.append(stats)
        if keep_predictions:
            record.predicted.append(prediction)
        states[t + 1] = plant.step(states[t], u0, w[t] if w is not None else None)
    if hasattr(controller, "audit_report"):
        record.audit_report = controller.audit_report()
    return record
