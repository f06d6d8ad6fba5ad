"""Block-partitioned LTI models, interconnection graphs, and benchmark builders.

A model is a pair of block matrices (A, B) partitioned by subsystem.  The
interconnection graph has a directed edge j -> i whenever the block [A]_ij or
[B]_ij is nonzero, i.e. whenever subsystem j influences subsystem i in one
step.  d-hop incoming/outgoing sets of that graph drive every locality notion
in the rest of the package.
"""

import json
from dataclasses import dataclass

import numpy as np


class ModelError(ValueError):
    """Inconsistent model data (dimensions, block shapes, non-finite entries)."""


@dataclass(frozen=True)
class SubsystemPartition:
    """Per-subsystem state/input sizes plus derived offsets.

    Parameters
    ----------
    state_dims, input_dims : tuple of int
        Sizes n_i and p_i per subsystem.  All sizes are >= 0 and at least one
        state size must be positive.
    """

    state_dims: tuple
    input_dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "state_dims", tuple(int(v) for v in self.state_dims))
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        if len(self.state_dims) != len(self.input_dims):
            raise ModelError("state_dims and input_dims must have equal length")
        if len(self.state_dims) == 0:
            raise ModelError("need at least one subsystem")
        if any(v < 0 for v in self.state_dims + self.input_dims):
            raise ModelError("subsystem dimensions must be nonnegative")
        if sum(self.state_dims) == 0:
            raise ModelError("at least one subsystem must have a state")

    @property
    def N(self) -> int:
        return len(self.state_dims)

    @property
    def n(self) -> int:
        return sum(self.state_dims)

    @property
    def p(self) -> int:
        return sum(self.input_dims)

    @property
    def x_offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.state_dims)))

    @property
    def u_offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.input_dims)))

    def x_slice(self, i: int) -> slice:
        off = self.x_offsets
        return slice(int(off[i]), int(off[i + 1]))

    def u_slice(self, i: int) -> slice:
        off = self.u_offsets
        return slice(int(off[i]), int(off[i + 1]))

    def x_indices(self, i: int) -> np.ndarray:
        s = self.x_slice(i)
        return np.arange(s.start, s.stop)

    def u_indices(self, i: int) -> np.ndarray:
        s = self.u_slice(i)
        return np.arange(s.start, s.stop)

    def state_owner(self) -> np.ndarray:
        """Map each global state index to its subsystem id."""
        return np.repeat(np.arange(self.N), self.state_dims)

    def input_owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.N), self.input_dims)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=float))
    out.setflags(write=False)
    return out


class SystemModel:
    """Discrete-time plant x(t+1) = A x(t) + B u(t) + w(t), stored block-wise.

    Blocks are kept in dicts keyed by (i, j); absent keys are exact-zero
    blocks.  The dense matrices are assembled lazily and cached.  Instances
    are immutable after construction and safe to share across threads.
    """

    def __init__(self, partition: SubsystemPartition, a_blocks: dict, b_blocks: dict,
                 dt: float = 1.0):
        self.partition = partition
        self.dt = float(dt)
        self._a = {}
        self._b = {}
        for (i, j), blk in a_blocks.items():
            blk = _freeze(blk)
            self._check_block("A", i, j, blk, partition.state_dims, partition.state_dims)
            self._a[(int(i), int(j))] = blk
        for (i, j), blk in b_blocks.items():
            blk = _freeze(blk)
            self._check_block("B", i, j, blk, partition.state_dims, partition.input_dims)
            self._b[(int(i), int(j))] = blk
        self._dense_a = None
        self._dense_b = None

    @staticmethod
    def _check_block(name, i, j, blk, row_dims, col_dims):
        N = len(row_dims)
        if not (0 <= i < N and 0 <= j < N):
            raise ModelError(f"{name} block index ({i},{j}) out of range")
        if blk.shape != (row_dims[i], col_dims[j]):
            raise ModelError(
                f"{name} block ({i},{j}) has shape {blk.shape}, "
                f"expected {(row_dims[i], col_dims[j])}")
        if not np.all(np.isfinite(blk)):
            raise ModelError(f"{name} block ({i},{j}) has non-finite entries")

    @classmethod
    def from_dense(cls, partition: SubsystemPartition, A, B, dt: float = 1.0,
                   zero_tol: float = 0.0):
        """Split dense (A, B) into blocks, dropping blocks with max-abs <= zero_tol."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if A.shape != (partition.n, partition.n):
            raise ModelError(f"A has shape {A.shape}, expected {(partition.n, partition.n)}")
        if B.shape != (partition.n, partition.p):
            raise ModelError(f"B has shape {B.shape}, expected {(partition.n, partition.p)}")
        a_blocks, b_blocks = {}, {}
        for i in range(partition.N):
            xi = partition.x_slice(i)
            for j in range(partition.N):
                ablk = A[xi, partition.x_slice(j)]
                if ablk.size and np.max(np.abs(ablk)) > zero_tol:
                    a_blocks[(i, j)] = ablk
                bblk = B[xi, partition.u_slice(j)]
                if bblk.size and np.max(np.abs(bblk)) > zero_tol:
                    b_blocks[(i, j)] = bblk
        return cls(partition, a_blocks, b_blocks, dt=dt)

    def a_block(self, i: int, j: int) -> np.ndarray:
        blk = self._a.get((i, j))
        if blk is None:
            blk = np.zeros((self.partition.state_dims[i], self.partition.state_dims[j]))
            blk.setflags(write=False)
        return blk

    def b_block(self, i: int, j: int) -> np.ndarray:
        blk = self._b.get((i, j))
        if blk is None:
            blk = np.zeros((self.partition.state_dims[i], self.partition.input_dims[j]))
            blk.setflags(write=False)
        return blk

    def has_a_block(self, i: int, j: int) -> bool:
        return (i, j) in self._a

    def has_b_block(self, i: int, j: int) -> bool:
        return (i, j) in self._b

    def a_block_keys(self):
        return sorted(self._a)

    def b_block_keys(self):
        return sorted(self._b)

    @property
    def A(self) -> np.ndarray:
        if self._dense_a is None:
            part = self.partition
            A = np.zeros((part.n, part.n))
            for (i, j), blk in self._a.items():
                A[part.x_slice(i), part.x_slice(j)] = blk
            self._dense_a = _freeze(A)
        return self._dense_a

    @property
    def B(self) -> np.ndarray:
        if self._dense_b is None:
            part = self.partition
            B = np.zeros((part.n, part.p))
            for (i, j), blk in self._b.items():
                B[part.x_slice(i), part.u_slice(j)] = blk
            self._dense_b = _freeze(B)
        return self._dense_b

    def step(self, x: np.ndarray, u: np.ndarray, w=None) -> np.ndarray:
        """Advance the plant one step."""
        nxt = self.A @ x + self.B @ u
        if w is not None:
            nxt = nxt + w
        return nxt


@dataclass(frozen=True)
class InterconnectionGraph:
    """Directed influence graph: edge j -> i iff [A]_ij != 0 or [B]_ij != 0.

    Adjacency lists are sorted tuples, so the ordering is deterministic.
    """

    n_vertices: int
    successors: tuple
    predecessors: tuple

    def __post_init__(self):
        object.__setattr__(self, "successors",
                           tuple(tuple(sorted(s)) for s in self.successors))
        object.__setattr__(self, "predecessors",
                           tuple(tuple(sorted(s)) for s in self.predecessors))


def build_interconnection_graph(model: SystemModel) -> InterconnectionGraph:
    """Graph whose edges exactly match the nonzero block supports of (A, B)."""
    N = model.partition.N
    succ = [set() for _ in range(N)]
    pred = [set() for _ in range(N)]
    for (i, j) in list(model._a) + list(model._b):
        succ[j].add(i)
        pred[i].add(j)
    return InterconnectionGraph(N, tuple(succ), tuple(pred))


def _ball(adjacency, i: int, d: int, n: int) -> tuple:
    if not (0 <= i < n):
        raise IndexError(f"subsystem index {i} out of range [0, {n})")
    if d < 0:
        raise ValueError("hop radius must be nonnegative")
    seen = {i}
    frontier = [i]
    for _ in range(d):
        nxt = []
        for v in frontier:
            for w in adjacency[v]:
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        if not nxt:
            break
        frontier = nxt
    return tuple(sorted(seen))


def d_outgoing(graph: InterconnectionGraph, i: int, d: int) -> tuple:
    """Vertices reachable from i in at most d hops (always contains i)."""
    return _ball(graph.successors, i, d, graph.n_vertices)


def d_incoming(graph: InterconnectionGraph, i: int, d: int) -> tuple:
    """Vertices that reach i in at most d hops (always contains i)."""
    return _ball(graph.predecessors, i, d, graph.n_vertices)


def build_pendulum_chain(N: int, spring_k: float = 1.0, damper_c: float = 3.0,
                         dt: float = 0.2, gravity: float = 10.0) -> SystemModel:
    """Chain of pendulums coupled to their neighbors by a spring and damper.

    Each pendulum has states [angle, angular velocity] and one input driving
    the velocity.  Unit mass and length, linearized about zero angle:

        th_dd_i = -g*th_i - k*(2 th_i - th_{i-1} - th_{i+1})
                  - c*(2 w_i - w_{i-1} - w_{i+1}) + u_i

    with one-sided coupling at the chain ends, discretized by forward Euler.
    """
    if N < 2:
        raise ModelError("pendulum chain needs at least two subsystems")
    if dt <= 0:
        raise ModelError("dt must be positive")
    part = SubsystemPartition((2,) * N, (1,) * N)
    a_blocks, b_blocks = {}, {}
    for i in range(N):
        n_nbr = (i > 0) + (i < N - 1)
        a_blocks[(i, i)] = np.array([
            [1.0, dt],
            [-dt * (gravity + n_nbr * spring_k), 1.0 - n_nbr * damper_c * dt],
        ])
        b_blocks[(i, i)] = np.array([[0.0], [dt]])
        coupling = np.array([[0.0, 0.0], [dt * spring_k, dt * damper_c]])
        if i > 0 and np.any(coupling):
            a_blocks[(i, i - 1)] = coupling
        if i < N - 1 and np.any(coupling):
            a_blocks[(i, i + 1)] = coupling.copy()
    return SystemModel(part, a_blocks, b_blocks, dt=dt)


def build_benchmark_chain(N: int, dt: float = 1.0) -> SystemModel:
    """Two-state chain benchmark with fixed diagonal/off-diagonal blocks."""
    if N < 1:
        raise ModelError("benchmark chain needs at least one subsystem")
    part = SubsystemPartition((2,) * N, (1,) * N)
    a_diag = np.array([[1.0, 0.1], [-0.3, 0.7]])
    a_off = np.array([[0.0, 0.0], [0.1, 0.1]])
    b_diag = np.array([[0.0], [0.1]])
    a_blocks, b_blocks = {}, {}
    for i in range(N):
        a_blocks[(i, i)] = a_diag
        b_blocks[(i, i)] = b_diag
        if i > 0:
            a_blocks[(i, i - 1)] = a_off
        if i < N - 1:
            a_blocks[(i, i + 1)] = a_off
    return SystemModel(part, a_blocks, b_blocks, dt=dt)


def model_to_dict(model: SystemModel) -> dict:
    """JSON-ready representation; float values round-trip bit-exactly."""
    return {
        "format": "dlmpc-model",
        "version": 1,
        "state_dims": list(model.partition.state_dims),
        "input_dims": list(model.partition.input_dims),
        "dt": model.dt,
        "a_blocks": [
            {"i": i, "j": j, "values": model.a_block(i, j).tolist()}
            for (i, j) in model.a_block_keys()
        ],
        "b_blocks": [
            {"i": i, "j": j, "values": model.b_block(i, j).tolist()}
            for (i, j) in model.b_block_keys()
        ],
    }


def model_from_dict(data: dict) -> SystemModel:
    if data.get("format") != "dlmpc-model":
        raise ModelError("not a dlmpc model document")
    part = SubsystemPartition(tuple(data["state_dims"]), tuple(data["input_dims"]))
    a_blocks = {(b["i"], b["j"]): np.array(b["values"], dtype=float).reshape(
        part.state_dims[b["i"]], part.state_dims[b["j"]]) for b in data["a_blocks"]}
    b_blocks = {(b["i"], b["j"]): np.array(b["values"], dtype=float).reshape(
        part.state_dims[b["i"]], part.input_dims[b["j"]]) for b in data["b_blocks"]}
    return SystemModel(part, a_blocks, b_blocks, dt=data.get("dt", 1.0))


def save_model(model: SystemModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> SystemModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
