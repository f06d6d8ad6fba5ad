"""Quadratic costs and linear constraints over stacked trajectories.

A trajectory is stacked exactly like the rows of the response column:
states t = 0..T, then inputs t = 0..T-1.  Costs are sums of squared linear
forms per predicted time; constraints are per-time linear rows with optional
bounds and an optional activation time measured on the simulation clock.
Every term names the subsystem that owns it, which is what the locality
structure of the solvers keys on.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CostTerm:
    """Contribution sum_t || L * xi_t[cols] ||^2 owned by one subsystem.

    ``cols`` are global component indices in the state (signal "x") or input
    (signal "u") vector.  ``times`` restricts the predicted times; None means
    the default range (states 1..T, inputs 0..T-1).
    """

    subsystem: int
    signal: str
    weights: np.ndarray
    cols: np.ndarray
    times: tuple = None

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weights, dtype=float))
        cols = np.asarray(self.cols, dtype=int)
        if W.shape[1] != cols.size:
            raise ValueError("weights width and cols length differ")
        if self.signal not in ("x", "u"):
            raise ValueError("signal must be 'x' or 'u'")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "cols", cols)
        if self.times is not None:
            object.__setattr__(self, "times", tuple(int(t) for t in self.times))

    def times_for(self, T: int) -> tuple:
        if self.times is not None:
            return self.times
        return tuple(range(1, T + 1)) if self.signal == "x" else tuple(range(T))


def _coords(horizon, signal: str, t: int, cols: np.ndarray) -> np.ndarray:
    """Stacked-trajectory coordinates of signal components at predicted time t."""
    if signal == "x":
        return t * horizon.n + cols
    return horizon.n_x_rows + t * horizon.p + cols


def _positions(local_coords: np.ndarray, coords: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(local_coords, coords)
    if np.any(pos >= local_coords.size) or np.any(local_coords[np.minimum(pos, local_coords.size - 1)] != coords):
        raise ValueError("cost/constraint footprint falls outside the local slice")
    return pos


@dataclass(frozen=True)
class QuadraticCost:
    """A bag of CostTerms with assembly and evaluation helpers."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    def terms_of(self, i: int):
        return [t for t in self.terms if t.subsystem == i]

    def subsystems(self):
        return sorted({t.subsystem for t in self.terms})

    def footprint_cols(self, i: int):
        """Global state/input components touched by subsystem i's terms."""
        xc, uc = set(), set()
        for t in self.terms_of(i):
            (xc if t.signal == "x" else uc).update(t.cols.tolist())
        return np.array(sorted(xc), dtype=int), np.array(sorted(uc), dtype=int)

    def assemble(self, horizon, local_coords: np.ndarray = None,
                 subsystems=None):
        """Quadratic data (H, g) with value 1/2 y'Hy + g'y over the coords.

        ``local_coords`` is a sorted array of stacked-trajectory coordinates;
        None means the full trajectory.  ``subsystems`` restricts which
        owners' terms are included.
        """
        if local_coords is None:
            local_coords = np.arange(horizon.n_rows)
        m = local_coords.size
        H = np.zeros((m, m))
        for term in self.terms:
            if subsystems is not None and term.subsystem not in subsystems:
                continue
            quad = 2.0 * term.weights.T @ term.weights
            for t in term.times_for(horizon.T):
                pos = _positions(local_coords, _coords(horizon, term.signal, t, term.cols))
                H[np.ix_(pos, pos)] += quad
        return H, np.zeros(m)

    def value(self, x_traj: np.ndarray, u_traj: np.ndarray) -> float:
        """Objective on a predicted trajectory (x: (T+1, n), u: (T, p))."""
        T = u_traj.shape[0]
        total = 0.0
        for term in self.terms:
            sig = x_traj if term.signal == "x" else u_traj
            for t in term.times_for(T):
                total += float(np.sum((term.weights @ sig[t, term.cols]) ** 2))
        return total

    def stage_value(self, x: np.ndarray, u: np.ndarray) -> float:
        """One realized step's cost: every term applied once."""
        total = 0.0
        for term in self.terms:
            vec = x[term.cols] if term.signal == "x" else u[term.cols]
            total += float(np.sum((term.weights @ vec) ** 2))
        return total


@dataclass(frozen=True)
class ConstraintTemplate:
    """One linear row lower <= a' xi_t[cols] <= upper, owned by a subsystem.

    ``start_time`` activates the row only at predicted times whose absolute
    simulation time exceeds it (t_abs = (tau + t) * dt); None means always.
    State rows apply at t = 1..T, input rows at t = 0..T-1.
    """

    subsystem: int
    signal: str
    a: np.ndarray
    cols: np.ndarray
    lower: float = None
    upper: float = None
    start_time: float = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        cols = np.asarray(self.cols, dtype=int)
        if a.size != cols.size:
            raise ValueError("row vector and cols length differ")
        if self.lower is None and self.upper is None:
            raise ValueError("constraint needs at least one bound")
        if self.signal not in ("x", "u"):
            raise ValueError("signal must be 'x' or 'u'")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "cols", cols)

    def active_times(self, T: int, dt: float, tau: int):
        times = range(1, T + 1) if self.signal == "x" else range(T)
        if self.start_time is None:
            return list(times)
        return [t for t in times if (tau + t) * dt > self.start_time]


def constraint_matrix(templates, horizon, dt: float, tau: int,
                      local_coords: np.ndarray = None, subsystems=None):
    """Stack templates into G y <= h rows over the given coordinates.

    Two-sided templates contribute a row per bound.  Rows are equilibrated to
    unit norm, which keeps downstream KKT systems well conditioned.
    """
    if local_coords is None:
        local_coords = np.arange(horizon.n_rows)
    rows, bounds = [], []
    for tpl in templates:
        if subsystems is not None and tpl.subsystem not in subsystems:
            continue
        scale = np.linalg.norm(tpl.a)
        if scale == 0.0:
            continue
        for t in tpl.active_times(horizon.T, dt, tau):
            pos = _positions(local_coords, _coords(horizon, tpl.signal, t, tpl.cols))
            row = np.zeros(local_coords.size)
            row[pos] = tpl.a / scale
            if tpl.upper is not None:
                rows.append(row)
                bounds.append(tpl.upper / scale)
            if tpl.lower is not None:
                rows.append(-row)
                bounds.append(-tpl.lower / scale)
    if not rows:
        return np.zeros((0, local_coords.size)), np.zeros(0)
    return np.array(rows), np.array(bounds)


def terminal_equalities(horizon, subsystems, local_coords: np.ndarray = None):
    """Selector rows forcing the predicted terminal state of each subsystem to zero."""
    if local_coords is None:
        local_coords = np.arange(horizon.n_rows)
    part = horizon.partition
    rows = []
    for i in subsystems:
        coords = horizon.T * horizon.n + part.x_indices(i)
        pos = _positions(local_coords, coords)
        block = np.zeros((coords.size, local_coords.size))
        block[np.arange(coords.size), pos] = 1.0
        rows.append(block)
    if not rows:
        return np.zeros((0, local_coords.size)), np.zeros(0)
    A = np.vstack(rows)
    return A, np.zeros(A.shape[0])


def constraint_violation(templates, x_traj: np.ndarray, u_traj: np.ndarray,
                         dt: float, start_step: int = 0) -> float:
    """Worst slack violation of the templates along a realized trajectory.

    Realized step s is checked against templates active at absolute time
    s * dt; state rows skip s = 0 (the measured initial state).
    """
    worst = 0.0
    steps = u_traj.shape[0]
    for tpl in templates:
        sig = x_traj if tpl.signal == "x" else u_traj
        first = 1 if tpl.signal == "x" else 0
        last = steps if tpl.signal == "x" else steps - 1
        for s in range(max(first, start_step), last + 1):
            if tpl.start_time is not None and s * dt <= tpl.start_time:
                continue
            val = float(tpl.a @ sig[s, tpl.cols])
            if tpl.upper is not None:
                worst = max(worst, val - tpl.upper)
            if tpl.lower is not None:
                worst = max(worst, tpl.lower - val)
    return worst
