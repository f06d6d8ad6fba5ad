"""Finite-horizon system-level machinery.

The decision object everywhere is the first block column of the stacked
response Phi = [Phi_x; Phi_u]: the map from the initial state to the predicted
state and input trajectories.  Row layout of the stack is all state blocks
t = 0..T followed by all input blocks t = 0..T-1.

The achievability constraint couples the blocks column-wise:

    Phi_x[0] = I,   Phi_x[t+1] = A Phi_x[t] + B Phi_u[t].

Locality restricts the block support: state blocks (i, j) are allowed iff
i is in out_j(d), input blocks iff i is in out_j(d+1).
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from .systems import (InterconnectionGraph, SubsystemPartition, SystemModel,
                      d_outgoing)


@dataclass(frozen=True)
class HorizonSpec:
    """Prediction horizon and the induced row layout of the stacked response."""

    T: int
    partition: SubsystemPartition

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("horizon must be at least one step")

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def p(self) -> int:
        return self.partition.p

    @property
    def n_x_rows(self) -> int:
        return (self.T + 1) * self.n

    @property
    def n_rows(self) -> int:
        return (self.T + 1) * self.n + self.T * self.p

    def x_rows_of(self, i: int) -> np.ndarray:
        """Stacked row indices of subsystem i's states, all times, ascending."""
        base = self.partition.x_indices(i)
        return (np.arange(self.T + 1)[:, None] * self.n + base[None, :]).ravel()

    def u_rows_of(self, i: int) -> np.ndarray:
        base = self.partition.u_indices(i)
        off = self.n_x_rows
        return (off + np.arange(self.T)[:, None] * self.p + base[None, :]).ravel()

    def rows_of(self, i: int) -> np.ndarray:
        """All stacked rows owned by subsystem i (its x rows then u rows)."""
        return np.concatenate([self.x_rows_of(i), self.u_rows_of(i)])

    def row_owner(self) -> np.ndarray:
        """Subsystem id of every stacked row."""
        x_owner = np.tile(self.partition.state_owner(), self.T + 1)
        u_owner = np.tile(self.partition.input_owner(), self.T)
        return np.concatenate([x_owner, u_owner])

    def row_is_state(self) -> np.ndarray:
        out = np.zeros(self.n_rows, dtype=bool)
        out[:self.n_x_rows] = True
        return out


@dataclass(frozen=True)
class LocalityMask:
    """Block-level support of the response column induced by d-hop sets.

    ``x_support[i, j]`` is True iff state blocks of subsystem i may respond to
    the initial state of subsystem j; ``u_support`` likewise for input blocks
    (one hop wider).  The support is time invariant, covers the diagonal, and
    grows monotonically with d.
    """

    d: int
    x_support: np.ndarray
    u_support: np.ndarray
    horizon: HorizonSpec

    def scalar_mask(self) -> np.ndarray:
        """Boolean mask over the full stacked response column block."""
        h = self.horizon
        owner = h.row_owner()
        col_owner = h.partition.state_owner()
        is_x = h.row_is_state()
        block = np.where(is_x[:, None], self.x_support[owner][:, col_owner],
                         self.u_support[owner][:, col_owner])
        return block

    def column_rows(self, j: int) -> np.ndarray:
        """Stacked rows allowed to be nonzero in subsystem j's column block."""
        h = self.horizon
        owner = h.row_owner()
        is_x = h.row_is_state()
        keep = np.where(is_x, self.x_support[owner, j], self.u_support[owner, j])
        return np.flatnonzero(keep)

    def row_cols(self, i: int) -> np.ndarray:
        """Initial-state columns that subsystem i's rows may touch."""
        col_owner = self.horizon.partition.state_owner()
        keep = self.x_support[i, col_owner] | self.u_support[i, col_owner]
        return np.flatnonzero(keep)

    def covers(self, other: "LocalityMask") -> bool:
        return bool(np.all(self.x_support >= other.x_support)
                    and np.all(self.u_support >= other.u_support))


def build_locality_mask(graph: InterconnectionGraph, d: int,
                        horizon: HorizonSpec) -> LocalityMask:
    """Mask allowing state blocks on out_j(d) and input blocks on out_j(d+1)."""
    if d < 0:
        raise ValueError("locality radius must be nonnegative")
    N = graph.n_vertices
    x_sup = np.zeros((N, N), dtype=bool)
    u_sup = np.zeros((N, N), dtype=bool)
    for j in range(N):
        x_sup[list(d_outgoing(graph, j, d)), j] = True
        u_sup[list(d_outgoing(graph, j, d + 1)), j] = True
    return LocalityMask(d=d, x_support=x_sup, u_support=u_sup, horizon=horizon)


def assemble_achievability(model: SystemModel, horizon: HorizonSpec):
    """Sparse operator Z and right-hand side E1 with Z @ Phi_column = E1.

    Row block 0 pins Phi_x[0] = I; row block t+1 encodes the recursion
    Phi_x[t+1] - A Phi_x[t] - B Phi_u[t] = 0.
    """
    if model.partition != horizon.partition:
        raise ValueError("model and horizon partitions disagree")
    n, p, T = horizon.n, horizon.p, horizon.T
    eye_n = scipy.sparse.identity(n, format="coo")
    A = scipy.sparse.coo_matrix(model.A)
    B = scipy.sparse.coo_matrix(model.B)

    rows, cols, vals = [], [], []

    def put(block, row0, col0, scale=1.0):
        rows.append(block.row + row0)
        cols.append(block.col + col0)
        vals.append(block.data * scale)

    put(eye_n, 0, 0)
    for t in range(T):
        r0 = (t + 1) * n
        put(eye_n, r0, (t + 1) * n)
        put(A, r0, t * n, scale=-1.0)
        put(B, r0, horizon.n_x_rows + t * p, scale=-1.0)
    Z = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=((T + 1) * n, horizon.n_rows)).tocsr()
    E1 = np.zeros(((T + 1) * n, n))
    E1[:n, :] = np.eye(n)
    return Z, E1


@dataclass(frozen=True)
class PartitionSets:
    """Row/column ownership of the stacked response and the mask-coupled sets.

    ``rows[i]``/``cols[i]`` are the indices owned by subsystem i; ``row_cols[i]``
    are the columns its row slice touches; ``col_rows[i]`` the rows its column
    block touches.  Ownership partitions the full index range.
    """

    rows: tuple
    cols: tuple
    row_cols: tuple
    col_rows: tuple


def build_partitions(mask: LocalityMask,
                     partition: SubsystemPartition) -> PartitionSets:
    h = mask.horizon
    if partition != h.partition:
        raise ValueError("partition disagrees with the mask's horizon")
    rows, cols, row_cols, col_rows = [], [], [], []
    for i in range(partition.N):
        rows.append(h.rows_of(i))
        cols.append(partition.x_indices(i))
        row_cols.append(mask.row_cols(i))
        col_rows.append(mask.column_rows(i))
    freeze = lambda arrs: tuple(np.asarray(a, dtype=int) for a in arrs)
    return PartitionSets(freeze(rows), freeze(cols), freeze(row_cols),
                         freeze(col_rows))


@dataclass(frozen=True)
class ResponseColumn:
    """First block column of the stacked response: maps x0 to trajectories."""

    horizon: HorizonSpec
    phi_x: np.ndarray
    phi_u: np.ndarray

    def __post_init__(self):
        h = self.horizon
        if self.phi_x.shape != (h.n_x_rows, h.n):
            raise ValueError(f"phi_x has shape {self.phi_x.shape}, "
                             f"expected {(h.n_x_rows, h.n)}")
        if self.phi_u.shape != (h.T * h.p, h.n):
            raise ValueError(f"phi_u has shape {self.phi_u.shape}, "
                             f"expected {(h.T * h.p, h.n)}")

    def stacked(self) -> np.ndarray:
        return np.vstack([self.phi_x, self.phi_u])

    def to_dict(self, mask: LocalityMask = None) -> dict:
        """Serialize as coordinate/value triples, restricted to a mask if given."""
        stacked = self.stacked()
        keep = mask.scalar_mask() if mask is not None else np.ones_like(stacked, bool)
        rr, cc = np.nonzero(keep)
        return {
            "format": "dlmpc-response",
            "T": self.horizon.T,
            "state_dims": list(self.horizon.partition.state_dims),
            "input_dims": list(self.horizon.partition.input_dims),
            "entries": [[int(r), int(c), float(stacked[r, c])]
                        for r, c in zip(rr, cc)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResponseColumn":
        part = SubsystemPartition(tuple(data["state_dims"]), tuple(data["input_dims"]))
        h = HorizonSpec(int(data["T"]), part)
        stacked = np.zeros((h.n_rows, h.n))
        for r, c, v in data["entries"]:
            stacked[int(r), int(c)] = float(v)
        return cls(h, stacked[:h.n_x_rows], stacked[h.n_x_rows:])


def response_from_stacked(horizon: HorizonSpec, stacked: np.ndarray) -> ResponseColumn:
    return ResponseColumn(horizon, stacked[:horizon.n_x_rows].copy(),
                          stacked[horizon.n_x_rows:].copy())


def reconstruct_trajectory(response: ResponseColumn, x0: np.ndarray):
    """Apply the response to an initial state: (states (T+1, n), inputs (T, p))."""
    h = response.horizon
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (h.n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({h.n},)")
    x = (response.phi_x @ x0).reshape(h.T + 1, h.n)
    u = (response.phi_u @ x0).reshape(h.T, h.p) if h.p else np.zeros((h.T, 0))
    return x, u


def local_constraint_rows(Z: scipy.sparse.csr_matrix, col_rows: np.ndarray) -> np.ndarray:
    """Constraint rows of Z whose support intersects the given variable rows.

    Rows outside this set read 0 = 0 once off-mask entries are pinned to zero,
    so restricting to them is exact.
    """
    indicator = np.zeros(Z.shape[1])
    indicator[col_rows] = 1.0
    touched = abs(Z) @ indicator
    return np.flatnonzero(touched > 0)


def solve_column_responses(model: SystemModel, mask: LocalityMask,
                           rcond: float = None):
    """Solve each masked column block by least squares (QR, column pivoting).

    Returns (ResponseColumn, per-column-block relative residuals).  This is an
    independent construction of localized responses used both by the
    localizability check and as a cross-check for the iterative solvers.
    """
    h = mask.horizon
    Z, E1 = assemble_achievability(model, h)
    part = h.partition
    stacked = np.zeros((h.n_rows, h.n))
    residuals = np.zeros(part.N)
    for j in range(part.N):
        cols = part.x_indices(j)
        if cols.size == 0:
            continue
        var_rows = mask.column_rows(j)
        q_rows = local_constraint_rows(Z, var_rows)
        Z_loc = Z[q_rows][:, var_rows].toarray()
        rhs = E1[np.ix_(q_rows, cols)]
        sol, _, _, _ = scipy.linalg.lstsq(Z_loc, rhs, lapack_driver="gelsy",
                                          cond=rcond)
        res = np.linalg.norm(Z_loc @ sol - rhs)
        scale = max(np.linalg.norm(E1[:, cols]), 1e-300)
        residuals[j] = res / scale
        stacked[np.ix_(var_rows, cols)] = sol
    return response_from_stacked(h, stacked), residuals


@dataclass(frozen=True)
class LocalizabilityReport:
    feasible: bool
    worst_residual: float
    column_residuals: np.ndarray
    d: int
    T: int
    tol: float


def check_localizability(model: SystemModel, d: int, T: int,
                         graph: InterconnectionGraph = None,
                         tol: float = 1e-8) -> LocalizabilityReport:
    """Does the locality subspace intersect the achievable set?

    Feasible iff the worst per-column relative least-squares residual of the
    masked achievability system is below tol.  Infeasibility is a report
    value, never an exception.
    """
    from .systems import build_interconnection_graph
    if graph is None:
        graph = build_interconnection_graph(model)
    h = HorizonSpec(T, model.partition)
    mask = build_locality_mask(graph, d, h)
    _, residuals = solve_column_responses(model, mask)
    worst = float(residuals.max()) if residuals.size else 0.0
    return LocalizabilityReport(feasible=bool(worst <= tol), worst_residual=worst,
                                column_residuals=residuals, d=d, T=T, tol=tol)


def rollout_residual(model: SystemModel, x: np.ndarray, u: np.ndarray) -> float:
    """Max-norm defect of the plant recursion along a predicted trajectory."""
    T = u.shape[0]
    worst = 0.0
    for t in range(T):
        defect = x[t + 1] - (model.A @ x[t] + model.B @ u[t])
        worst = max(worst, float(np.max(np.abs(defect))) if defect.size else 0.0)
    return worst


def random_achievable_full_response(model: SystemModel, T: int, rng) -> tuple:
    """Random block-lower-triangular (Phi_x, Phi_u) satisfying full achievability.

    Draws a random causal Phi_u and propagates the state response through the
    dynamics, so the pair is achievable by construction.
    """
    n, p = model.partition.n, model.partition.p
    phi_u = np.zeros((T * p, (T + 1) * n))
    for t in range(T):
        phi_u[t * p:(t + 1) * p, :(t + 1) * n] = rng.standard_normal((p, (t + 1) * n))
    phi_x = np.zeros(((T + 1) * n, (T + 1) * n))
    phi_x[:n, :n] = np.eye(n)
    for t in range(T):
        blk = model.A @ phi_x[t * n:(t + 1) * n] + model.B @ phi_u[t * p:(t + 1) * p]
        blk = blk.copy()
        blk[:, (t + 1) * n:] = 0.0
        phi_x[(t + 1) * n:(t + 2) * n] = blk
        phi_x[(t + 1) * n:(t + 2) * n, (t + 1) * n:(t + 2) * n] += np.eye(n)
    return phi_x, phi_u


def realize_controller(phi_x_full: np.ndarray, phi_u_full: np.ndarray,
                       model: SystemModel, w: np.ndarray):
    """Run the internal-state realization against a plant rollout.

    The realization is u = Phi_u w_hat, x_hat = (Phi_x - I) w_hat with
    w_hat = x - x_hat reconstructed step by step; the disturbance vector is
    w = [x0; w_0; ...; w_{T-1}].  Returns the simulated (states, inputs),
    which for achievable responses equal Phi_x w and Phi_u w.
    """
    n, p = model.partition.n, model.partition.p
    T = phi_u_full.shape[0] // p if p else (phi_x_full.shape[0] // n - 1)
    if phi_x_full.shape != ((T + 1) * n, (T + 1) * n):
        raise ValueError("phi_x_full has inconsistent shape")
    if p and phi_u_full.shape != (T * p, (T + 1) * n):
        raise ValueError("phi_u_full has inconsistent shape")
    for t in range(T + 1):
        bad_x = phi_x_full[t * n:(t + 1) * n, (t + 1) * n:]
        if bad_x.size and np.max(np.abs(bad_x)) > 1e-12:
            raise ValueError(f"phi_x_full is non-causal at block row {t}")
        if p and t < T:
            bad_u = phi_u_full[t * p:(t + 1) * p, (t + 1) * n:]
            if bad_u.size and np.max(np.abs(bad_u)) > 1e-12:
                raise ValueError(f"phi_u_full is non-causal at block row {t}")

    w = np.asarray(w, dtype=float).reshape(T + 1, n)
    x = np.zeros((T + 1, n))
    u = np.zeros((T, p))
    w_hat = np.zeros((T + 1) * n)
    x[0] = w[0]
    for t in range(T):
        # delayed disturbance reconstruction: x_hat uses strictly causal blocks
        x_hat_t = phi_x_full[t * n:(t + 1) * n, :t * n] @ w_hat[:t * n] if t else np.zeros(n)
        w_hat[t * n:(t + 1) * n] = x[t] - x_hat_t
        u[t] = phi_u_full[t * p:(t + 1) * p, :(t + 1) * n] @ w_hat[:(t + 1) * n]
        x[t + 1] = model.A @ x[t] + model.B @ u[t] + w[t + 1]
    return x, u
