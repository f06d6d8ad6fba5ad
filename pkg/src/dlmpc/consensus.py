"""Nested consensus ADMM for costs and constraints that couple d-local neighbors.

The outer loop is identical to the separable solver; the row update is
replaced by an inner consensus loop.  Each agent jointly optimizes its row
slice and its local copies of every neighbor's trajectory slice, copies are
averaged at their owners, and scaled duals push the copies to agreement.
Copies, averages, and duals are warm-started across outer iterations and
across MPC steps.
"""

from dataclasses import dataclass

import numpy as np

from .admm import (AdmmParams, AdmmResult, ConvergenceError, Harness,
                   IterationStats, SubproblemError, _apply_phi_inbox,
                   _apply_psi_inbox, _assemble, _achievability_residual,
                   _pair_messages, _scatter_phi, _scatter_psi, _Worker,
                   column_update, dual_update)
from .agents import Message
from .kernels import KernelError
from .problems import CoupledLocalProblem, ProblemGeometry


@dataclass(frozen=True)
class ConsensusParams:
    """Penalty and stopping data for the inner consensus loop."""

    mu: float = 1.0
    eps_x: float = 1e-4
    max_inner: int = 2000

    def __post_init__(self):
        if min(self.mu, self.eps_x) <= 0 or self.max_inner <= 0:
            raise ValueError("consensus parameters must be positive")


def consensus_x_update(cp: CoupledLocalProblem, psi_row, lam_row, z_values: dict,
                       y_values: dict, rho: float, mu: float):
    """Joint minimization over the row slice and all local trajectory copies."""
    zy = np.empty(cp.x_coords.size)
    for j, pos in cp.seg_pos.items():
        zy[pos] = z_values[j] - y_values[j]
    return cp.x_update(psi_row, lam_row, zy, rho, mu)


def consensus_z_update(copies, duals=None) -> np.ndarray:
    """Average the copies of one slice (plus duals when they do not cancel)."""
    if not copies:
        raise ValueError("no copies received for the consensus average")
    stack = np.array(copies)
    if duals is not None:
        stack = stack + np.array(duals)
    return stack.mean(axis=0)


def consensus_y_update(x_copy: np.ndarray, z_value: np.ndarray,
                       y_value: np.ndarray) -> np.ndarray:
    return y_value + x_copy - z_value


class _CoupledWorker(_Worker):
    """Adds the consensus state (copies, average, duals) to a row/column worker."""

    def __init__(self, cp, geom, warm=None):
        super().__init__(cp, geom, warm[:4] if warm is not None else None)
        self.cp = cp
        if warm is None or len(warm) == 4:
            self.X = np.zeros(cp.x_coords.size)
            self.z = {j: np.zeros(cp.seg_pos[j].size) for j in geom.in_d}
            self.y = {j: np.zeros(cp.seg_pos[j].size) for j in geom.in_d}
        else:
            self.X = warm[4].copy()
            self.z = {j: v.copy() for j, v in warm[5].items()}
            self.y = {j: v.copy() for j, v in warm[6].items()}
        self.copies_in = {}
        self.consensus_residual = np.inf

    def snapshot(self):
        return super().snapshot() + (self.X.copy(),
                                     {j: v.copy() for j, v in self.z.items()},
                                     {j: v.copy() for j, v in self.y.items()})


def solve_coupled(problems, geometry: ProblemGeometry,
                  admm_params: AdmmParams = None,
                  consensus_params: ConsensusParams = None,
                  harness: Harness = None, warm_state=None,
                  record_achievability: bool = True,
                  record_inner: bool = False) -> AdmmResult:
    """Outer row/column ADMM with the row step solved by inner consensus.

    Raises ConvergenceError if either loop exhausts its iteration budget.
    """
    admm_params = admm_params or AdmmParams()
    cons = consensus_params or ConsensusParams()
    if harness is None:
        from .systems import build_interconnection_graph
        harness = Harness.build(build_interconnection_graph(geometry.model),
                                geometry.d)
    workers = [
        _CoupledWorker(cp, geometry.agents[i],
                       warm_state[i] if warm_state is not None else None)
        for i, cp in enumerate(problems)
    ]
    rho, mu = admm_params.rho, cons.mu
    primal_hist, dual_hist, achv_hist, time_hist, inner_hist = [], [], [], [], []
    inner_rows = [] if record_inner else None
    msgs0 = bytes0 = 0
    if harness.logs is not None:
        msgs0 = sum(l.sent_msgs for l in harness.logs.values())
        bytes0 = sum(l.sent_bytes for l in harness.logs.values())

    done = False
    for k in range(1, admm_params.max_iter + 1):
        harness.clock.outer = k
        iter_time = 0.0

        inner_done = False
        n_inner = 0
        while not inner_done:
            n_inner += 1
            if n_inner > cons.max_inner:
                raise ConvergenceError(
                    f"consensus loop did not converge in {cons.max_inner} "
                    f"iterations at outer iteration {k} (worst residual "
                    f"{max(w.consensus_residual for w in workers):.3e})",
                    primal_history=np.array(primal_hist),
                    dual_history=np.array(dual_hist))
            harness.clock.inner = n_inner

            def step_x(w):
                def fn():
                    try:
                        w.phi_r, w.X = consensus_x_update(
                            w.cp, w.psi_r, w.lam_r, w.z, w.y, rho, mu)
                    except KernelError as exc:
                        raise SubproblemError(w.geom.i, k, exc) from exc
                return fn

            _, t_x = harness.scheduler.run_phase([step_x(w) for w in workers])
            iter_time += t_x.max()

            rid = harness.clock.round_id("x_copy")
            outbox = []
            for w in workers:
                for j in w.geom.in_d:
                    if j == w.geom.i:
                        continue
                    outbox.append(Message(rid, w.geom.i, j, "x_copy",
                                          w.X[w.cp.seg_pos[j]],
                                          rows=geometry.horizon.rows_of(j)))
            inboxes = harness.exchange("x_copy", outbox)
            for w in workers:
                w.copies_in = {m.sender: m.payload for m in inboxes.get(w.geom.i, [])}

            # owners average the copies; the dual average telescopes to zero
            # under this update rule, so it drops from the mean
            def step_z(w):
                def fn():
                    holders = [h for h in w.geom.out_d if h != w.geom.i]
                    copies = [w.X[w.cp.seg_pos[w.geom.i]]]
                    copies += [w.copies_in[h] for h in holders]
                    w.z[w.geom.i] = consensus_z_update(copies)
                return fn

            _, t_z = harness.scheduler.run_phase([step_z(w) for w in workers])
            iter_time += t_z.max()

            rid = harness.clock.round_id("z_value")
            outbox = []
            for w in workers:
                for h in w.geom.out_d:
                    if h == w.geom.i:
                        continue
                    outbox.append(Message(rid, w.geom.i, h, "z_value",
                                          w.z[w.geom.i],
                                          rows=geometry.horizon.rows_of(w.geom.i)))
            inboxes = harness.exchange("z_value", outbox)
            for w in workers:
                for m in inboxes.get(w.geom.i, []):
                    w.z[m.sender] = m.payload

            def step_y(w):
                def fn():
                    for j in w.geom.in_d:
                        w.y[j] = consensus_y_update(w.X[w.cp.seg_pos[j]],
                                                    w.z[j], w.y[j])
                    w.consensus_residual = float(np.linalg.norm(
                        w.X[w.cp.seg_pos[w.geom.i]] - w.z[w.geom.i]))
                return fn

            _, t_y = harness.scheduler.run_phase([step_y(w) for w in workers])
            iter_time += t_y.max()
            if inner_rows is not None:
                inner_rows += [(k, n_inner, w.geom.i, w.consensus_residual)
                               for w in workers]
            inner_done = all(w.consensus_residual < cons.eps_x for w in workers)

        harness.clock.inner = 0
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
        iter_time += t_col.max()

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
        iter_time += t_dual.max()

        primal_hist.append([w.primal for w in workers])
        dual_hist.append([w.dual for w in workers])
        inner_hist.append(n_inner)
        time_hist.append(float(iter_time))
        if record_achievability:
            achv_hist.append(_achievability_residual(geometry, workers))
        if all(w.primal <= admm_params.eps_p and w.dual <= admm_params.eps_d
               for w in workers):
            done = True
            break

    stats = IterationStats(
        primal=np.array(primal_hist), dual=np.array(dual_hist),
        achievability=np.array(achv_hist) if record_achievability else None,
        iter_ms=1e3 * np.array(time_hist),
        inner_counts=np.array(inner_hist, dtype=int),
        consensus=inner_rows, iterations=len(primal_hist), converged=done)
    if harness.logs is not None:
        stats.msgs_total = sum(l.sent_msgs for l in harness.logs.values()) - msgs0
        stats.bytes_total = sum(l.sent_bytes for l in harness.logs.values()) - bytes0
    if not done:
        raise ConvergenceError(
            f"coupled ADMM did not converge in {admm_params.max_iter} iterations "
            f"(worst primal {stats.primal[-1].max():.3e}, "
            f"dual {stats.dual[-1].max():.3e})",
            primal_history=stats.primal, dual_history=stats.dual)
    return AdmmResult(response=_assemble(geometry, workers, "phi"),
                      psi_response=_assemble(geometry, workers, "psi"),
                      stats=stats,
                      warm_state=[w.snapshot() for w in workers])
