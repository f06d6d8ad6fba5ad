"""Per-subsystem geometry and local subproblem assembly.

Each subsystem owns the rows of the stacked response holding its trajectory
and the columns holding its initial-state components.  The locality mask
couples those to a bounded neighborhood, fixed by (graph, d, T) and reused
across MPC steps: index sets, packing maps, message routing tables, and the
offline column projectors all live in ProblemGeometry.

Per MPC step (fixed x0), the geometry is specialized into LocalProblem /
CoupledLocalProblem objects that carry the quadratic data and prefactored
solvers for the row updates.
"""

from dataclasses import dataclass, field

import numpy as np

from . import costs as _costs
from .kernels import ColumnProjector, EqQpSolver, Polytope, QpSettings, QpSolver
from .sls import (HorizonSpec, LocalityMask, PartitionSets, assemble_achievability,
                  build_locality_mask, build_partitions, local_constraint_rows)
from .systems import SystemModel, build_interconnection_graph, d_incoming, d_outgoing


@dataclass
class ExchangePair:
    """Index maps moving one sub-block between a row owner and a column owner.

    ``rows`` are the shared global stacked rows (owner k's rows inside owner
    j's column slice); the remaining arrays are positions of those rows and of
    j's columns inside each side's local slice.
    """

    sender: int
    receiver: int
    rows: np.ndarray
    row_pos_in_rowslice: np.ndarray   # rows located in k's row slice
    col_pos_in_rowslice: np.ndarray   # j's columns located in k's row-slice columns
    row_pos_in_colslice: np.ndarray   # rows located in j's column slice


@dataclass
class AgentGeometry:
    """Everything subsystem i knows about its slice of the response."""

    i: int
    rows: np.ndarray          # owned stacked rows (sorted)
    cols: np.ndarray          # owned initial-state columns
    row_cols: np.ndarray      # columns coupled to the row slice
    col_rows: np.ndarray      # rows coupled to the column block
    row_mask: np.ndarray      # boolean submask of the row slice
    mask_flat: np.ndarray     # flat indices of allowed row-slice entries
    var_rows: np.ndarray      # per-variable row position inside the slice
    var_cols: np.ndarray      # per-variable column position inside the slice
    projector: ColumnProjector
    in_d: tuple               # in_i(d)
    out_d: tuple              # out_i(d)
    in_d1: tuple              # in_i(d+1)
    out_d1: tuple             # out_i(d+1)
    model_reads: tuple        # ('A'|'B', k, l) blocks backing the projector

    @property
    def n_vars(self) -> int:
        return self.mask_flat.size

    @property
    def row_slice_shape(self) -> tuple:
        return (self.rows.size, self.row_cols.size)

    @property
    def col_slice_shape(self) -> tuple:
        return (self.col_rows.size, self.cols.size)

    def pack(self, slice_mat: np.ndarray) -> np.ndarray:
        """Masked entries of a row-slice matrix as a flat variable vector."""
        return slice_mat.ravel()[self.mask_flat]

    def unpack(self, m: np.ndarray) -> np.ndarray:
        out = np.zeros(self.row_slice_shape)
        out.ravel()[self.mask_flat] = m
        return out

    def s_matrix(self, xbar0: np.ndarray) -> np.ndarray:
        """Linear map from packed variables to the local trajectory y = M xbar0."""
        S = np.zeros((self.rows.size, self.n_vars))
        S[self.var_rows, np.arange(self.n_vars)] = xbar0[self.var_cols]
        return S

    def row_subproblem_size(self, n_constraints: int = 0) -> tuple:
        return self.n_vars, n_constraints

    def col_subproblem_size(self) -> tuple:
        n_vars = self.col_rows.size * self.cols.size
        n_cons = self.projector.Z.shape[0] * self.cols.size
        return n_vars, n_cons


@dataclass
class ProblemGeometry:
    """Mask-derived structure shared by every solver, built once per (model, d, T)."""

    model: SystemModel
    d: int
    horizon: HorizonSpec
    mask: LocalityMask
    partitions: PartitionSets
    agents: tuple
    phi_pairs: tuple          # ExchangePair list, row owner -> column owner
    pair_lookup: dict         # (row owner, column owner) -> ExchangePair
    state_receivers: tuple    # per owner j: agents needing [x0]_j (excluding j)
    Z: object                 # sparse achievability operator
    E1: np.ndarray

    @property
    def N(self) -> int:
        return self.model.partition.N

    def pairs_from(self, k: int):
        return [pr for pr in self.phi_pairs if pr.sender == k]

    def pairs_to(self, j: int):
        return [pr for pr in self.phi_pairs if pr.receiver == j]


def _derive_model_reads(model: SystemModel, graph, j: int, d: int) -> tuple:
    """Blocks of (A, B) appearing in subsystem j's local achievability system."""
    out_d = set(d_outgoing(graph, j, d))
    out_d1 = set(d_outgoing(graph, j, d + 1))
    q_blocks = set(out_d)
    for (k, l) in model.a_block_keys():
        if l in out_d:
            q_blocks.add(k)
    for (k, l) in model.b_block_keys():
        if l in out_d1:
            q_blocks.add(k)
    reads = []
    for (k, l) in model.a_block_keys():
        if k in q_blocks and l in out_d:
            reads.append(("A", k, l))
    for (k, l) in model.b_block_keys():
        if k in q_blocks and l in out_d1:
            reads.append(("B", k, l))
    return tuple(sorted(reads))


def build_geometry(model: SystemModel, d: int, T: int, graph=None,
                   access_logs=None) -> ProblemGeometry:
    """Index sets, projectors, and routing tables for one (model, d, T).

    ``access_logs`` is an optional map from agent id to an AccessLog; when
    given, the model blocks backing each agent's projector are recorded.
    """
    if graph is None:
        graph = build_interconnection_graph(model)
    part = model.partition
    horizon = HorizonSpec(T, part)
    mask = build_locality_mask(graph, d, horizon)
    partitions = build_partitions(mask, part)
    Z, E1 = assemble_achievability(model, horizon)
    scalar_mask = mask.scalar_mask()

    agents = []
    for i in range(part.N):
        rows = partitions.rows[i]
        cols = partitions.cols[i]
        row_cols = partitions.row_cols[i]
        col_rows = partitions.col_rows[i]
        submask = scalar_mask[np.ix_(rows, row_cols)]
        var_rows, var_cols = np.nonzero(submask)
        mask_flat = var_rows * row_cols.size + var_cols
        q_rows = local_constraint_rows(Z, col_rows)
        Z_loc = Z[q_rows][:, col_rows].toarray()
        rhs = E1[np.ix_(q_rows, cols)]
        reads = _derive_model_reads(model, graph, i, d)
        if access_logs is not None:
            for kind, k, l in reads:
                access_logs[i].record_model_read(kind, k, l)
        agents.append(AgentGeometry(
            i=i, rows=rows, cols=cols, row_cols=row_cols, col_rows=col_rows,
            row_mask=submask, mask_flat=mask_flat, var_rows=var_rows,
            var_cols=var_cols, projector=ColumnProjector.build(Z_loc, rhs),
            in_d=d_incoming(graph, i, d), out_d=d_outgoing(graph, i, d),
            in_d1=d_incoming(graph, i, d + 1), out_d1=d_outgoing(graph, i, d + 1),
            model_reads=reads))

    pairs = []
    for k in range(part.N):
        for j in range(part.N):
            shared = np.intersect1d(agents[k].rows, agents[j].col_rows)
            if shared.size == 0:
                continue
            pairs.append(ExchangePair(
                sender=k, receiver=j, rows=shared,
                row_pos_in_rowslice=np.searchsorted(agents[k].rows, shared),
                col_pos_in_rowslice=np.searchsorted(agents[k].row_cols, agents[j].cols),
                row_pos_in_colslice=np.searchsorted(agents[j].col_rows, shared)))

    state_receivers = []
    for j in range(part.N):
        recv = [i for i in agents[j].out_d1 if i != j]
        state_receivers.append(tuple(recv))

    return ProblemGeometry(model=model, d=d, horizon=horizon, mask=mask,
                           partitions=partitions, agents=tuple(agents),
                           phi_pairs=tuple(pairs),
                           pair_lookup={(p.sender, p.receiver): p for p in pairs},
                           state_receivers=tuple(state_receivers), Z=Z, E1=E1)


def _compose_rows(rows_y: np.ndarray, bounds: np.ndarray, S: np.ndarray,
                  kind: str, tol: float = 1e-12):
    """Push trajectory-space rows through y = S m, re-equilibrate, drop vacuous rows.

    A row that vanishes after composition must be satisfiable with the zero
    map: feasible bounds are dropped, anything else raises.
    """
    if rows_y.shape[0] == 0:
        return np.zeros((0, S.shape[1])), np.zeros(0)
    M = rows_y @ S
    norms = np.linalg.norm(M, axis=1)
    keep_rows, keep_bounds = [], []
    for r in range(M.shape[0]):
        if norms[r] <= tol:
            ok = bounds[r] >= -1e-9 if kind == "ineq" else abs(bounds[r]) <= 1e-9
            if not ok:
                raise ValueError(
                    f"{kind} constraint row {r} is unsatisfiable after composition "
                    f"(bound {bounds[r]:.3e})")
            continue
        keep_rows.append(M[r] / norms[r])
        keep_bounds.append(bounds[r] / norms[r])
    if not keep_rows:
        return np.zeros((0, S.shape[1])), np.zeros(0)
    return np.array(keep_rows), np.array(keep_bounds)


class LocalProblem:
    """Row-update subproblem of one subsystem for one MPC step (separable case).

    Minimizes f_i(M xbar0) + (rho/2) ||M - V||_F^2 over the masked row slice,
    subject to the local trajectory polytope.  The KKT factorization is done
    once; each ADMM iteration is a back-substitution (plus the splitting loop
    when inequality rows are present, warm-started across iterations).
    """

    def __init__(self, geom: AgentGeometry, xbar0: np.ndarray, H_y: np.ndarray,
                 g_y: np.ndarray, G_y: np.ndarray, h_y: np.ndarray,
                 A_y: np.ndarray, b_y: np.ndarray, qp_settings: QpSettings = None):
        self.geom = geom
        self.i = geom.i
        self.xbar0 = np.asarray(xbar0, dtype=float)
        self.S = geom.s_matrix(self.xbar0)
        self.H_y, self.g_y = H_y, g_y
        self.qp_settings = qp_settings or QpSettings()
        self._StHS = self.S.T @ (H_y @ self.S)
        self._Stg = self.S.T @ g_y
        self.G_m, self.h_m = _compose_rows(G_y, h_y, self.S, "ineq")
        self.A_m, self.b_m = _compose_rows(A_y, b_y, self.S, "eq")
        self._solvers = {}
        self._warm = None

    @property
    def n_vars(self) -> int:
        return self.geom.n_vars

    @property
    def n_constraints(self) -> int:
        return self.G_m.shape[0] + self.A_m.shape[0]

    def has_inequalities(self) -> bool:
        return self.G_m.shape[0] > 0

    def _solver(self, rho: float):
        key = float(rho)
        if key not in self._solvers:
            K = self._StHS + key * np.eye(self.n_vars)
            if self.has_inequalities():
                poly = Polytope(G=self.G_m, h=self.h_m,
                                A_eq=self.A_m if self.A_m.size else None,
                                b_eq=self.b_m if self.A_m.size else None)
                self._solvers[key] = QpSolver(K, poly, self.qp_settings)
            else:
                self._solvers[key] = EqQpSolver(K, self.A_m if self.A_m.size else None)
        return self._solvers[key]

    def row_update(self, psi_row: np.ndarray, lam_row: np.ndarray,
                   rho: float) -> np.ndarray:
        v = self.geom.pack(psi_row - lam_row)
        g = self._Stg - rho * v
        solver = self._solver(rho)
        if self.has_inequalities():
            m, self._warm, _ = solver.solve(
                g, b_eq=self.b_m if self.A_m.size else None, warm=self._warm)
        else:
            m = solver.solve(g, self.b_m if self.A_m.size else None)
        return self.geom.unpack(m)

    def trajectory(self, phi_row: np.ndarray) -> np.ndarray:
        """Local trajectory slice implied by a row-slice iterate."""
        return phi_row @ self.xbar0


class CoupledLocalProblem:
    """Joint x-update subproblem for the consensus solver (coupled case).

    Decision variables are the masked row slice and the agent's copies of
    every neighbor trajectory slice; the agent's own copy is eliminated
    through the linking constraint X_i = M xbar0.
    """

    def __init__(self, geom: AgentGeometry, horizon: HorizonSpec,
                 xbar0: np.ndarray, x_coords: np.ndarray, seg_pos: dict,
                 H_X: np.ndarray, g_X: np.ndarray, G_X: np.ndarray,
                 h_X: np.ndarray, A_y: np.ndarray, b_y: np.ndarray,
                 qp_settings: QpSettings = None):
        self.geom = geom
        self.i = geom.i
        self.xbar0 = np.asarray(xbar0, dtype=float)
        self.S = geom.s_matrix(self.xbar0)
        self.x_coords = x_coords
        self.seg_pos = seg_pos            # neighbor id -> positions in x_coords
        self.H_X, self.g_X = H_X, g_X
        self.qp_settings = qp_settings or QpSettings()

        own = seg_pos[geom.i]
        oth_mask = np.ones(x_coords.size, dtype=bool)
        oth_mask[own] = False
        self.pos_own = own
        self.pos_oth = np.flatnonzero(oth_mask)
        self.n_m = geom.n_vars
        self.n_oth = self.pos_oth.size

        # joint inequality rows over (m, X_oth)
        if G_X.shape[0]:
            G_joint = np.hstack([G_X[:, own] @ self.S, G_X[:, self.pos_oth]])
            norms = np.linalg.norm(G_joint, axis=1)
            keep = norms > 1e-12
            bad = ~keep & (h_X < -1e-9)
            if np.any(bad):
                raise ValueError("coupled constraint row unsatisfiable after composition")
            self.G_joint = G_joint[keep] / norms[keep][:, None]
            self.h_joint = h_X[keep] / norms[keep]
        else:
            self.G_joint = np.zeros((0, self.n_m + self.n_oth))
            self.h_joint = np.zeros(0)
        A_m, b_m = _compose_rows(A_y, b_y, self.S, "eq")
        self.A_joint = np.hstack([A_m, np.zeros((A_m.shape[0], self.n_oth))])
        self.b_joint = b_m
        self._solvers = {}
        self._warm = None

    @property
    def n_vars(self) -> int:
        return self.n_m + self.n_oth

    @property
    def n_constraints(self) -> int:
        return self.G_joint.shape[0] + self.A_joint.shape[0]

    def has_inequalities(self) -> bool:
        return self.G_joint.shape[0] > 0

    def _solver(self, rho: float, mu: float):
        key = (float(rho), float(mu))
        if key not in self._solvers:
            M = self.H_X + mu * np.eye(self.x_coords.size)
            M_oo = M[np.ix_(self.pos_own, self.pos_own)]
            M_oe = M[np.ix_(self.pos_own, self.pos_oth)]
            M_ee = M[np.ix_(self.pos_oth, self.pos_oth)]
            Q = np.zeros((self.n_vars, self.n_vars))
            Q[:self.n_m, :self.n_m] = self.S.T @ (M_oo @ self.S) + rho * np.eye(self.n_m)
            Q[:self.n_m, self.n_m:] = self.S.T @ M_oe
            Q[self.n_m:, :self.n_m] = Q[:self.n_m, self.n_m:].T
            Q[self.n_m:, self.n_m:] = M_ee
            if self.has_inequalities():
                poly = Polytope(G=self.G_joint, h=self.h_joint,
                                A_eq=self.A_joint if self.A_joint.size else None,
                                b_eq=self.b_joint if self.A_joint.size else None)
                self._solvers[key] = QpSolver(Q, poly, self.qp_settings)
            else:
                self._solvers[key] = EqQpSolver(
                    Q, self.A_joint if self.A_joint.size else None)
        return self._solvers[key]

    def x_update(self, psi_row: np.ndarray, lam_row: np.ndarray, zy: np.ndarray,
                 rho: float, mu: float):
        """Solve the joint subproblem; zy holds z - y stacked over x_coords.

        Returns (row-slice iterate, full local trajectory copy vector).
        """
        v = self.geom.pack(psi_row - lam_row)
        c_X = self.g_X - mu * zy
        g = np.empty(self.n_vars)
        g[:self.n_m] = self.S.T @ c_X[self.pos_own] - rho * v
        g[self.n_m:] = c_X[self.pos_oth]
        solver = self._solver(rho, mu)
        if self.has_inequalities():
            sol, self._warm, _ = solver.solve(
                g, b_eq=self.b_joint if self.A_joint.size else None,
                warm=self._warm)
        else:
            sol = solver.solve(g, self.b_joint if self.A_joint.size else None)
        m = sol[:self.n_m]
        X = np.empty(self.x_coords.size)
        X[self.pos_own] = self.S @ m
        X[self.pos_oth] = sol[self.n_m:]
        return self.geom.unpack(m), X


def build_local_problems(geometry: ProblemGeometry, cost, templates, x0,
                         tau: int = 0, terminal: bool = False,
                         qp_settings: QpSettings = None, access_logs=None):
    """Specialize the geometry into separable row-update problems for one x0.

    Every cost term and constraint must live on its owner's own trajectory
    slice; coupled footprints belong in build_coupled_problems.
    """
    h = geometry.horizon
    x0 = np.asarray(x0, dtype=float)
    problems = []
    for geom in geometry.agents:
        local_coords = geom.rows
        H_y, g_y = cost.assemble(h, local_coords, subsystems={geom.i})
        G_y, h_y = _costs.constraint_matrix(
            templates, h, geometry.model.dt, tau, local_coords,
            subsystems={geom.i})
        if terminal:
            A_y, b_y = _costs.terminal_equalities(h, [geom.i], local_coords)
        else:
            A_y, b_y = np.zeros((0, local_coords.size)), np.zeros(0)
        xbar0 = x0[geom.row_cols]
        if access_logs is not None:
            owners = h.partition.state_owner()[geom.row_cols]
            for j in sorted(set(owners.tolist())):
                access_logs[geom.i].record_x0_read(j)
        problems.append(LocalProblem(geom, xbar0, H_y, g_y, G_y, h_y, A_y, b_y,
                                     qp_settings))
    return problems


def build_coupled_problems(geometry: ProblemGeometry, cost, templates, x0,
                           tau: int = 0, terminal: bool = False,
                           qp_settings: QpSettings = None, access_logs=None):
    """Specialize the geometry into consensus x-update problems for one x0."""
    h = geometry.horizon
    x0 = np.asarray(x0, dtype=float)
    problems = []
    for geom in geometry.agents:
        segs = {j: h.rows_of(j) for j in geom.in_d}
        x_coords = np.sort(np.concatenate([segs[j] for j in geom.in_d]))
        seg_pos = {j: np.searchsorted(x_coords, segs[j]) for j in geom.in_d}
        H_X, g_X = cost.assemble(h, x_coords, subsystems={geom.i})
        G_X, h_X = _costs.constraint_matrix(
            templates, h, geometry.model.dt, tau, x_coords, subsystems={geom.i})
        if terminal:
            A_y, b_y = _costs.terminal_equalities(h, [geom.i], geom.rows)
        else:
            A_y, b_y = np.zeros((0, geom.rows.size)), np.zeros(0)
        xbar0 = x0[geom.row_cols]
        if access_logs is not None:
            owners = h.partition.state_owner()[geom.row_cols]
            for j in sorted(set(owners.tolist())):
                access_logs[geom.i].record_x0_read(j)
        problems.append(CoupledLocalProblem(geom, h, xbar0, x_coords, seg_pos,
                                            H_X, g_X, G_X, h_X, A_y, b_y,
                                            qp_settings))
    return problems
