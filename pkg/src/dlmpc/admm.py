"""Distributed row/column ADMM over the duplicated response variable.

One worker per subsystem.  Each outer iteration runs: local row update
(proximal cost step on the owned rows), row exchange, closed-form column
update (projection onto the local achievability set), column exchange, dual
ascent, convergence check.  The dual variable is maintained twice, once per
view; both views see the identical entrywise recursion, so they agree bit for
bit and never need to travel.
"""

from dataclasses import dataclass, field

import numpy as np

from .agents import (ChannelTopology, Message, RoundClock, SequentialScheduler,
                     build_channels, exchange)
from .kernels import ColumnProjector, KernelError
from .problems import LocalProblem, ProblemGeometry
from .sls import ResponseColumn, response_from_stacked


@dataclass(frozen=True)
class AdmmParams:
    """Penalty and stopping data for the outer loop."""

    rho: float = 1.0
    eps_p: float = 1e-4
    eps_d: float = 1e-4
    max_iter: int = 5000

    def __post_init__(self):
        if min(self.rho, self.eps_p, self.eps_d) <= 0 or self.max_iter <= 0:
            raise ValueError("ADMM parameters must be positive")


class ConvergenceError(RuntimeError):
    def __init__(self, msg, primal_history=None, dual_history=None):
        super().__init__(msg)
        self.primal_history = primal_history
        self.dual_history = dual_history


class SubproblemError(RuntimeError):
    """A local QP failed; carries the subsystem id and iteration."""

    def __init__(self, subsystem, iteration, cause):
        super().__init__(f"subsystem {subsystem} failed at iteration {iteration}: {cause}")
        self.subsystem = subsystem
        self.iteration = iteration
        self.cause = cause


def row_update(lp: LocalProblem, psi_row: np.ndarray, lam_row: np.ndarray,
               params: AdmmParams) -> np.ndarray:
    """Proximal cost step on the owned row slice (closed form when no
    inequality rows are present)."""
    return lp.row_update(psi_row, lam_row, params.rho)


def column_update(proj: ColumnProjector, phi_col: np.ndarray,
                  lam_col: np.ndarray) -> np.ndarray:
    """Closed-form projection of Phi + Lambda onto the local achievability set."""
    return proj.project(phi_col + lam_col)


def dual_update(phi_row: np.ndarray, psi_row: np.ndarray,
                lam_row: np.ndarray) -> np.ndarray:
    return lam_row + phi_row - psi_row


def converged(phi_row: np.ndarray, psi_row_new: np.ndarray,
              psi_row_old: np.ndarray, params: AdmmParams) -> bool:
    """Per-subsystem stopping rule; ties at the tolerance count as converged."""
    primal = np.linalg.norm(phi_row - psi_row_new)
    dual = np.linalg.norm(psi_row_new - psi_row_old)
    return bool(primal <= params.eps_p and dual <= params.eps_d)


@dataclass
class Harness:
    """Exchange fabric handed to the solvers: topology, scheduler, logs, clock."""

    topology: ChannelTopology
    scheduler: object = field(default_factory=SequentialScheduler)
    logs: dict = None
    clock: RoundClock = field(default_factory=RoundClock)

    @classmethod
    def build(cls, graph, d, scheduler=None, logs=None):
        return cls(topology=build_channels(graph, d),
                   scheduler=scheduler or SequentialScheduler(), logs=logs)

    def exchange(self, phase: str, outbox):
        return exchange(self.clock.round_id(phase), outbox, self.topology,
                        self.logs)


def broadcast_state(harness: Harness, geometry: ProblemGeometry,
                    x0: np.ndarray) -> None:
    """Share each owner's measured state components with its d+1 neighborhood.

    The payload content is implicit in the problems built from x0; this phase
    exists so measurement traffic is part of the message log and audit.
    """
    part = geometry.model.partition
    round_id = harness.clock.round_id("state")
    outbox = []
    for j in range(geometry.N):
        if harness.logs is not None:
            harness.logs[j].record_x0_read(j)
        payload = np.asarray(x0[part.x_slice(j)], dtype=float)
        for i in geometry.state_receivers[j]:
            outbox.append(Message(round_id, j, i, "state_measurement", payload,
                                  rows=part.x_indices(j)))
    exchange(round_id, outbox, harness.topology, harness.logs)


@dataclass
class IterationStats:
    """Per-iteration history of one distributed solve."""

    primal: np.ndarray = None            # (iters, N)
    dual: np.ndarray = None              # (iters, N)
    achievability: np.ndarray = None     # (iters,) residual of assembled Psi
    iter_ms: np.ndarray = None           # (iters,) simulated-parallel round time
    inner_counts: np.ndarray = None      # (iters,) consensus iterations (Algorithm 2)
    consensus: list = None               # rows (outer, inner, subsystem, residual)
    iterations: int = 0
    converged: bool = False
    msgs_total: int = 0
    bytes_total: int = 0


@dataclass
class AdmmResult:
    response: ResponseColumn             # row-update (Phi) side
    psi_response: ResponseColumn         # column-update (Psi) side, feasible
    stats: IterationStats
    warm_state: list                     # per-agent iterate tuple for warm starts


class _Worker:
    """Iterate state of one subsystem (row and column views plus duals)."""

    def __init__(self, lp, geom, warm=None):
        self.lp = lp
        self.geom = geom
        rs, cs = geom.row_slice_shape, geom.col_slice_shape
        if warm is None:
            self.phi_r = np.zeros(rs)
            self.psi_r = np.zeros(rs)
            self.lam_r = np.zeros(rs)
            self.lam_c = np.zeros(cs)
        else:
            self.phi_r, self.psi_r, self.lam_r, self.lam_c = (w.copy() for w in warm)
        self.phi_c = np.zeros(cs)
        self.psi_c = np.zeros(cs)
        self.psi_r_new = self.psi_r
        self.primal = np.inf
        self.dual = np.inf

    def snapshot(self):
        return (self.phi_r.copy(), self.psi_r.copy(), self.lam_r.copy(),
                self.lam_c.copy())


def _pair_messages(geometry, workers, round_id, side: str):
    """Build the exchange outbox for one side ('phi' rows out, 'psi' columns out)."""
    outbox = []
    for pair in geometry.phi_pairs:
        if pair.sender == pair.receiver:
            continue
        if side == "phi":
            w = workers[pair.sender]
            payload = w.phi_r[np.ix_(pair.row_pos_in_rowslice,
                                     pair.col_pos_in_rowslice)]
            outbox.append(Message(round_id, pair.sender, pair.receiver,
                                  "phi_rows", payload, rows=pair.rows,
                                  cols=geometry.agents[pair.receiver].cols))
        else:
            w = workers[pair.receiver]
            payload = w.psi_c[pair.row_pos_in_colslice, :]
            outbox.append(Message(round_id, pair.receiver, pair.sender,
                                  "psi_cols", payload, rows=pair.rows,
                                  cols=geometry.agents[pair.receiver].cols))
    return outbox


def _scatter_phi(geometry, workers):
    """Place own and received row blocks into every column owner's view."""
    for pair in geometry.phi_pairs:
        if pair.sender == pair.receiver:
            w = workers[pair.sender]
            w.phi_c[pair.row_pos_in_colslice, :] = w.phi_r[
                np.ix_(pair.row_pos_in_rowslice, pair.col_pos_in_rowslice)]


def _apply_phi_inbox(geometry, workers, inboxes):
    for j, box in inboxes.items():
        w = workers[j]
        for msg in box:
            pair = geometry.pair_lookup[(msg.sender, j)]
            w.phi_c[pair.row_pos_in_colslice, :] = msg.payload


def _scatter_psi(geometry, workers):
    for pair in geometry.phi_pairs:
        if pair.sender == pair.receiver:
            w = workers[pair.sender]
            w.psi_r_new[np.ix_(pair.row_pos_in_rowslice,
                               pair.col_pos_in_rowslice)] = \
                w.psi_c[pair.row_pos_in_colslice, :]


def _apply_psi_inbox(geometry, workers, inboxes):
    for k, box in inboxes.items():
        w = workers[k]
        for msg in box:
            pair = geometry.pair_lookup[(k, msg.sender)]
            w.psi_r_new[np.ix_(pair.row_pos_in_rowslice,
                               pair.col_pos_in_rowslice)] = msg.payload


def _assemble(geometry, workers, side: str) -> ResponseColumn:
    h = geometry.horizon
    stacked = np.zeros((h.n_rows, h.n))
    for w in workers:
        g = w.geom
        if side == "phi":
            stacked[np.ix_(g.rows, g.row_cols)] = w.phi_r
        else:
            stacked[np.ix_(g.col_rows, g.cols)] = w.psi_c
    return response_from_stacked(h, stacked)


def _achievability_residual(geometry, workers) -> float:
    psi = _assemble(geometry, workers, "psi")
    return float(np.linalg.norm(geometry.Z @ psi.stacked() - geometry.E1))


def solve(problems, geometry: ProblemGeometry, params: AdmmParams = None,
          harness: Harness = None, warm_state=None,
          record_achievability: bool = True) -> AdmmResult:
    """Run the distributed solve to convergence; see the module docstring.

    Raises ConvergenceError when max_iter is exhausted; local QP failures are
    re-raised as SubproblemError with the subsystem id and iteration.
    """
    params = params or AdmmParams()
    if harness is None:
        from .systems import build_interconnection_graph
        harness = Harness.build(build_interconnection_graph(geometry.model),
                                geometry.d)
    workers = [
        _Worker(lp, geometry.agents[i],
                warm_state[i] if warm_state is not None else None)
        for i, lp in enumerate(problems)
    ]
    N = len(workers)
    primal_hist, dual_hist, achv_hist, time_hist = [], [], [], []
    msgs0 = bytes0 = 0
    if harness.logs is not None:
        msgs0 = sum(l.sent_msgs for l in harness.logs.values())
        bytes0 = sum(l.sent_bytes for l in harness.logs.values())

    done = False
    for k in range(1, params.max_iter + 1):
        harness.clock.outer = k

        def step_row(w):
            def fn():
                try:
                    w.phi_r = row_update(w.lp, w.psi_r, w.lam_r, params)
                except KernelError as exc:
                    raise SubproblemError(w.geom.i, k, exc) from exc
            return fn

        _, t_row = harness.scheduler.run_phase([step_row(w) for w in workers])

        rid = harness.clock.round_id("phi")
        inboxes = harness.exchange("phi", _pair_messages(geometry, workers, rid, "phi"))
        _scatter_phi(geometry, workers)
        _apply_phi_inbox(geometry, workers, inboxes)

        def step_col(w):
            def fn():
                w.psi_c = column_update(w.geom.projector, w.phi_c, w.lam_c)
                w.lam_c = w.lam_c + w.phi_c - w.psi_c
                w.psi_r_new = w.psi_r.copy()
            return fn

        _, t_col = harness.scheduler.run_phase([step_col(w) for w in workers])

        rid = harness.clock.round_id("psi")
        inboxes = harness.exchange("psi", _pair_messages(geometry, workers, rid, "psi"))
        _scatter_psi(geometry, workers)
        _apply_psi_inbox(geometry, workers, inboxes)

        def step_dual(w):
            def fn():
                w.primal = float(np.linalg.norm(w.phi_r - w.psi_r_new))
                w.dual = float(np.linalg.norm(w.psi_r_new - w.psi_r))
                w.lam_r = dual_update(w.phi_r, w.psi_r_new, w.lam_r)
                w.psi_r = w.psi_r_new
            return fn

        _, t_dual = harness.scheduler.run_phase([step_dual(w) for w in workers])

        primal_hist.append([w.primal for w in workers])
        dual_hist.append([w.dual for w in workers])
        time_hist.append(float(t_row.max() + t_col.max() + t_dual.max()))
        if record_achievability:
            achv_hist.append(_achievability_residual(geometry, workers))
        if all(w.primal <= params.eps_p and w.dual <= params.eps_d
               for w in workers):
            done = True
            break

    stats = IterationStats(
        primal=np.array(primal_hist), dual=np.array(dual_hist),
        achievability=np.array(achv_hist) if record_achievability else None,
        iter_ms=1e3 * np.array(time_hist), iterations=len(primal_hist),
        converged=done)
    if harness.logs is not None:
        stats.msgs_total = sum(l.sent_msgs for l in harness.logs.values()) - msgs0
        stats.bytes_total = sum(l.sent_bytes for l in harness.logs.values()) - bytes0
    if not done:
        raise ConvergenceError(
            f"ADMM did not converge in {params.max_iter} iterations "
            f"(worst primal {stats.primal[-1].max():.3e}, "
            f"dual {stats.dual[-1].max():.3e})",
            primal_history=stats.primal, dual_history=stats.dual)
    return AdmmResult(response=_assemble(geometry, workers, "phi"),
                      psi_response=_assemble(geometry, workers, "psi"),
                      stats=stats,
                      warm_state=[w.snapshot() for w in workers])
