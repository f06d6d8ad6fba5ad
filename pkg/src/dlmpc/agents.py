"""Distributed execution fabric: channels, round-based exchange, and auditing.

Transport is in-process with barrier semantics; the point is the information
structure, not the wire.  A channel i -> j exists iff j is within d+1 hops of
i, the widest radius any payload needs.  Every send, byte, model-block read,
and initial-state read is logged per agent so a completed run can be audited
against the d-local information constraint.
"""

import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .systems import InterconnectionGraph, d_incoming, d_outgoing

PAYLOAD_KINDS = ("state_measurement", "phi_rows", "psi_cols", "x_copy", "z_value")


class ProtocolError(RuntimeError):
    """A message violated the channel topology or round discipline."""


@dataclass(frozen=True)
class ChannelTopology:
    """Allowed directed channels derived from d-hop sets (radius d+1)."""

    d: int
    senders: tuple    # senders[i] = receivers i may send to (sorted, includes i)
    receivers: tuple  # receivers[i] = senders i may hear from

    def allows(self, sender: int, receiver: int) -> bool:
        return receiver in self.senders[sender]


def build_channels(graph: InterconnectionGraph, d: int) -> ChannelTopology:
    if d < 0:
        raise ValueError("locality radius must be nonnegative")
    senders = tuple(d_outgoing(graph, i, d + 1) for i in range(graph.n_vertices))
    receivers = tuple(d_incoming(graph, i, d + 1) for i in range(graph.n_vertices))
    return ChannelTopology(d=d, senders=senders, receivers=receivers)


@dataclass(frozen=True)
class Message:
    """One payload slice in flight.  Index arrays let the receiver place the
    payload without any global bookkeeping."""

    round_id: tuple
    sender: int
    receiver: int
    kind: str
    payload: np.ndarray
    rows: np.ndarray = None
    cols: np.ndarray = None

    @property
    def nbytes(self) -> int:
        return int(self.payload.nbytes)


@dataclass
class AccessLog:
    """Append-only record of what one agent touched during a run."""

    agent: int
    model_reads: set = field(default_factory=set)
    x0_reads: set = field(default_factory=set)
    sent_msgs: int = 0
    sent_bytes: int = 0
    recv_msgs: int = 0
    recv_bytes: int = 0
    channels_used: set = field(default_factory=set)
    per_round: dict = field(default_factory=dict)   # round -> [msgs, bytes]

    def record_model_read(self, kind: str, i: int, j: int):
        self.model_reads.add((kind, int(i), int(j)))

    def record_x0_read(self, j: int):
        self.x0_reads.add(int(j))

    def record_send(self, msg: Message):
        self.sent_msgs += 1
        self.sent_bytes += msg.nbytes
        self.channels_used.add((msg.sender, msg.receiver))
        entry = self.per_round.setdefault(msg.round_id, [0, 0])
        entry[0] += 1
        entry[1] += msg.nbytes

    def record_recv(self, msg: Message):
        self.recv_msgs += 1
        self.recv_bytes += msg.nbytes


def new_access_logs(N: int) -> dict:
    return {i: AccessLog(agent=i) for i in range(N)}


def exchange(round_id: tuple, outbox, topology: ChannelTopology,
             logs: dict = None) -> dict:
    """Deliver a round of messages atomically; returns receiver -> inbox.

    Raises ProtocolError for out-of-topology channels or duplicate payloads of
    the same kind on one channel in one round.  Inboxes are sorted by
    (sender, kind) for deterministic consumption.
    """
    inboxes = defaultdict(list)
    seen = set()
    for msg in outbox:
        if msg.round_id != round_id:
            raise ProtocolError(
                f"message on channel {msg.sender}->{msg.receiver} carries round "
                f"{msg.round_id}, expected {round_id}")
        if msg.kind not in PAYLOAD_KINDS:
            raise ProtocolError(f"unknown payload kind {msg.kind!r}")
        if not topology.allows(msg.sender, msg.receiver):
            raise ProtocolError(
                f"channel {msg.sender}->{msg.receiver} is outside the d+1 "
                f"topology (round {round_id}, kind {msg.kind})")
        key = (msg.sender, msg.receiver, msg.kind)
        if key in seen:
            raise ProtocolError(
                f"duplicate {msg.kind} payload on channel "
                f"{msg.sender}->{msg.receiver} in round {round_id}")
        seen.add(key)
        if logs is not None:
            logs[msg.sender].record_send(msg)
            logs[msg.receiver].record_recv(msg)
        inboxes[msg.receiver].append(msg)
    for box in inboxes.values():
        box.sort(key=lambda m: (m.sender, m.kind))
    return dict(inboxes)


@dataclass(frozen=True)
class AuditViolation:
    agent: int
    kind: str
    detail: str


@dataclass(frozen=True)
class AuditReport:
    passed: bool
    violations: tuple
    totals: dict   # agent -> {msgs_sent, bytes_sent, model_blocks_read, x0_reads}

    def __str__(self):
        head = "audit: PASS" if self.passed else f"audit: FAIL ({len(self.violations)} violations)"
        lines = [head]
        lines += [f"  [{v.agent}] {v.kind}: {v.detail}" for v in self.violations]
        return "\n".join(lines)


def audit(logs: dict, graph: InterconnectionGraph, d: int) -> AuditReport:
    """Check every logged access against radius-(d+1) neighborhoods.

    Agents may read model blocks [A]_jk / [B]_jk and initial-state components
    [x0]_j only for j, k within in_i(d+1), and may use only channels of the
    derived topology.  Violations are report entries, not exceptions.
    """
    topology = build_channels(graph, d)
    violations = []
    totals = {}
    for i, log in sorted(logs.items()):
        allowed = set(d_incoming(graph, i, d + 1))
        for kind, j, k in sorted(log.model_reads):
            if j not in allowed or k not in allowed:
                violations.append(AuditViolation(
                    agent=i, kind="model_block",
                    detail=f"[{kind}]_({j},{k}) outside in_{i}({d + 1})"))
        for j in sorted(log.x0_reads):
            if j not in allowed:
                violations.append(AuditViolation(
                    agent=i, kind="x0_component",
                    detail=f"[x0]_{j} outside in_{i}({d + 1})"))
        for (s, r) in sorted(log.channels_used):
            if not topology.allows(s, r):
                violations.append(AuditViolation(
                    agent=i, kind="channel",
                    detail=f"channel {s}->{r} outside the d+1 topology"))
        totals[i] = {
            "msgs_sent": log.sent_msgs,
            "bytes_sent": log.sent_bytes,
            "model_blocks_read": len(log.model_reads),
            "x0_reads": len(log.x0_reads),
        }
    return AuditReport(passed=not violations, violations=tuple(violations),
                       totals=totals)


class SequentialScheduler:
    """Run per-agent work in index order, timing each agent.

    ``round_times`` accumulates, per round, the max per-agent wall time: the
    runtime the round would take if every agent computed in parallel.
    """

    parallel = False

    def __init__(self):
        self.round_times = []

    def run_phase(self, fns):
        times = np.zeros(len(fns))
        results = []
        for idx, fn in enumerate(fns):
            t0 = time.perf_counter()
            results.append(fn())
            times[idx] = time.perf_counter() - t0
        return results, times


class ThreadScheduler:
    """One worker per agent with a barrier per phase (results match the
    sequential scheduler bit for bit)."""

    parallel = True

    def __init__(self, max_workers: int = None):
        self.round_times = []
        self._max_workers = max_workers

    def run_phase(self, fns):
        times = np.zeros(len(fns))

        def timed(idx, fn):
            t0 = time.perf_counter()
            out = fn()
            times[idx] = time.perf_counter() - t0
            return out

        with ThreadPoolExecutor(max_workers=self._max_workers or len(fns)) as pool:
            futures = [pool.submit(timed, idx, fn) for idx, fn in enumerate(fns)]
            results = [f.result() for f in futures]
        return results, times


class RoundClock:
    """Monotone round ids (outer iteration, phase, inner iteration)."""

    def __init__(self):
        self.outer = 0
        self.inner = 0

    def round_id(self, phase: str) -> tuple:
        return (self.outer, phase, self.inner)
