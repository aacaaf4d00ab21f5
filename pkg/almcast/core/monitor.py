"""
Monitor host: greedy EH-to-OH distribution, OH load and liveness tracking,
failure handling and the brute-force global optimum used as a test oracle.

Costs are integer microseconds throughout so that the incremental cache and
an independent recomputation always agree bit for bit.
"""

import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import pandas as pd

from ..errors import (
    DistributionRejected,
    InstanceTooLargeError,
    McastError,
    MissingLatencyError,
    UnknownNodeError,
)
from ..models.measurement import Assignment, MeasurementReport
from ..models.scenario import NodeId, Role, TimingParams
from ..utils.logger import get_logger
from . import wire
from .endhost import l_meas
from .simnet import SimConn, SimHost, SimNetwork

logger = get_logger("almcast.monitor")

MAX_ORACLE_OH = 4
MAX_ORACLE_EH = 8

LOG_COLUMNS = ["eh_id", "oh_id", "cost_ms", "decision_us"]

Pair = Tuple[NodeId, NodeId]


def ms_to_us(ms: float) -> int:
    return round(ms * 1000.0)


def _pair(a: NodeId, b: NodeId) -> Pair:
    return (a, b) if a < b else (b, a)


class InterOhLatencyMatrix:
    """Symmetric OH-pair latencies, stored in microseconds."""

    def __init__(self, entries: Optional[Mapping[Pair, float]] = None):
        self._us: Dict[Pair, int] = {}
        for (a, b), ms in (entries or {}).items():
            self.set_ms(a, b, ms)

    def set_us(self, a: NodeId, b: NodeId, us: int) -> None:
        if a == b:
            raise McastError(f"no self-latency for {a}", code="MATRIX")
        self._us[_pair(a, b)] = max(1, int(us))

    def set_ms(self, a: NodeId, b: NodeId, ms: float) -> None:
        self.set_us(a, b, ms_to_us(ms))

    def get_us(self, a: NodeId, b: NodeId) -> Optional[int]:
        return self._us.get(_pair(a, b))

    def get_ms(self, a: NodeId, b: NodeId) -> Optional[float]:
        us = self.get_us(a, b)
        return None if us is None else us / 1000.0

    def remove(self, a: NodeId, b: NodeId) -> None:
        self._us.pop(_pair(a, b), None)

    def remove_node(self, node: NodeId) -> None:
        for key in [k for k in self._us if node in k]:
            del self._us[key]

    def require_us(self, a: NodeId, b: NodeId) -> int:
        us = self.get_us(a, b)
        if us is None:
            raise MissingLatencyError(f"no latency between {a} and {b}")
        return us

    def __contains__(self, pair: Pair) -> bool:
        return _pair(*pair) in self._us

    def __len__(self) -> int:
        return len(self._us)

    def pairs(self) -> List[Tuple[Pair, int]]:
        return sorted(self._us.items())


@dataclass
class OhEntry:
    reported_load: float = 0.0
    alive: bool = True
    assigned_count: int = 0
    last_report_ms: float = 0.0


@dataclass
class DistributionState:
    """Chosen_OH plus the monitor's view of every OH."""

    matrix: InterOhLatencyMatrix = field(default_factory=InterOhLatencyMatrix)
    w_load: float = 0.0
    chosen: Set[NodeId] = field(default_factory=set)
    oh_table: Dict[NodeId, OhEntry] = field(default_factory=dict)
    assignments: Dict[NodeId, Assignment] = field(default_factory=dict)
    op_count: int = 0
    unknown_chosen_pairs: List[Pair] = field(default_factory=list)
    _chosen_sum_us: int = 0

    def __post_init__(self):
        if self.w_load < 0:
            raise McastError("w_load must be >= 0", code="WEIGHTS")

    def register_oh(self, oh: NodeId, now_ms: float = 0.0, load: float = 0.0) -> OhEntry:
        entry = self.oh_table.get(oh)
        if entry is None:
            entry = self.oh_table[oh] = OhEntry(reported_load=load, last_report_ms=now_ms)
        return entry

    @property
    def chosen_sum_us(self) -> int:
        return self._chosen_sum_us

    def alive_ohs(self) -> List[NodeId]:
        return sorted(oh for oh, e in self.oh_table.items() if e.alive)

    def _add_chosen(self, oh: NodeId) -> None:
        if oh in self.chosen:
            return
        self._chosen_sum_us += sum(self.matrix.require_us(c, oh) for c in self.chosen)
        self.chosen.add(oh)

    def _recompute_chosen_sum(self) -> None:
        total = 0
        unknown: List[Pair] = []
        for a, b in itertools.combinations(sorted(self.chosen), 2):
            us = self.matrix.get_us(a, b)
            if us is None:
                unknown.append((a, b))
                continue
            total += us
        if unknown and unknown != self.unknown_chosen_pairs:
            logger.warning(f"chosen OH pair(s) without a latency, left out of the chosen sum: "
                           f"{', '.join(f'{a}-{b}' for a, b in unknown)}")
        self.unknown_chosen_pairs = unknown
        self._chosen_sum_us = total

    def refresh_matrix(self) -> None:
        """Call after the matrix changed under already chosen OHs."""
        self._recompute_chosen_sum()


def load_penalty_us(w_load: float, load: float) -> int:
    return round(w_load * load * 1000.0)


def latency_cost_us(chosen: Iterable[NodeId], candidate: NodeId, l_meas_us: int,
                    matrix: InterOhLatencyMatrix, load: float, w_load: float) -> int:
    """Integer-microsecond form of :func:`latency_cost`, computed from scratch."""
    members = sorted(set(chosen) | {candidate})
    total = 0
    for a, b in itertools.combinations(members, 2):
        total += matrix.require_us(a, b)
    return total + l_meas_us + load_penalty_us(w_load, load)


def latency_cost(chosen: Iterable[NodeId], candidate: NodeId, l_meas_ms: float,
                 matrix: InterOhLatencyMatrix, load: float, w_load: float = 0.0) -> float:
    """
    Cost of adding ``candidate`` for an EH: pairwise overlay latency of
    Chosen_OH with the candidate, plus the EH's own edge, plus a load penalty.

    Raises:
        MissingLatencyError: The matrix lacks a needed pair
    """
    return latency_cost_us(chosen, candidate, ms_to_us(l_meas_ms), matrix, load, w_load) / 1000.0


def _candidates(report: MeasurementReport, state: DistributionState) -> List[Tuple[NodeId, int]]:
    out = []
    for sample in report.ok_samples():
        entry = state.oh_table.get(sample.oh)
        if entry is not None and entry.alive:
            out.append((sample.oh, ms_to_us(l_meas(sample))))
    out.sort()
    return out


def distribute(report: MeasurementReport, state: DistributionState) -> Assignment:
    """
    Pick the OH for one EH and record it.

    Candidates are the report's Ok, alive OHs in NodeId order; the first
    strict minimum of the cost wins. Candidates lacking a latency towards
    a chosen OH are skipped.

    Raises:
        DistributionRejected: No usable candidate
    """
    best: Optional[Tuple[int, NodeId]] = None
    chosen = sorted(state.chosen)
    for oh, edge_us in _candidates(report, state):
        state.op_count += 1
        if oh in state.chosen:
            pairwise = state.chosen_sum_us
        else:
            extra = 0
            missing = False
            for c in chosen:
                state.op_count += 1
                us = state.matrix.get_us(c, oh)
                if us is None:
                    missing = True
                    break
                extra += us
            if missing:
                logger.debug(f"skipping {oh} for {report.eh}: latency to chosen set unknown")
                continue
            pairwise = state.chosen_sum_us + extra
        cost = pairwise + edge_us + load_penalty_us(state.w_load, state.oh_table[oh].reported_load)
        if best is None or cost < best[0]:
            best = (cost, oh)
    if best is None:
        raise DistributionRejected(f"no usable OH in report of {report.eh}")

    cost_us, winner = best
    previous = state.assignments.get(report.eh)
    if previous is not None and previous.oh in state.oh_table:
        state.oh_table[previous.oh].assigned_count -= 1
    state._add_chosen(winner)
    state.oh_table[winner].assigned_count += 1
    assignment = Assignment(eh=report.eh, oh=winner, cost_ms=cost_us / 1000.0)
    state.assignments[report.eh] = assignment
    return assignment


def handle_oh_failure(oh: NodeId, state: DistributionState) -> List[NodeId]:
    """
    Mark ``oh`` dead, drop it from Chosen_OH and release its EHs.

    Returns:
        EHs that were assigned to ``oh``, sorted; they must rejoin

    Raises:
        UnknownNodeError: ``oh`` was never registered
    """
    entry = state.oh_table.get(oh)
    if entry is None:
        raise UnknownNodeError(f"unknown OH {oh}")
    entry.alive = False
    affected = sorted(eh for eh, a in state.assignments.items() if a.oh == oh)
    for eh in affected:
        del state.assignments[eh]
    entry.assigned_count = 0
    if oh in state.chosen:
        state.chosen.discard(oh)
        state._recompute_chosen_sum()
    logger.info(f"{oh} declared dead, {len(affected)} EH(s) released")
    return affected


def update_load(oh: NodeId, reported_load: float, state: DistributionState, now_ms: float = 0.0) -> None:
    """
    Record a load report; a report from a dead OH revives it.

    Raises:
        McastError: Load outside [0, 1]
    """
    if not 0.0 <= reported_load <= 1.0:
        raise McastError(f"reported load {reported_load} outside [0, 1]", code="LOAD_RANGE")
    entry = state.register_oh(oh, now_ms)
    if not entry.alive:
        logger.info(f"{oh} reporting again, marked alive")
        entry.alive = True
    entry.reported_load = reported_load
    entry.last_report_ms = now_ms


def sweep_stale(state: DistributionState, now_ms: float, interval_ms: float,
                missed_reports: int) -> Dict[NodeId, List[NodeId]]:
    """Declare dead every alive OH silent for ``missed_reports`` intervals."""
    released: Dict[NodeId, List[NodeId]] = {}
    limit = missed_reports * interval_ms
    for oh in state.alive_ohs():
        if now_ms - state.oh_table[oh].last_report_ms >= limit:
            released[oh] = handle_oh_failure(oh, state)
    return released


# --- global optimum (test oracle) ------------------------------------------------


@dataclass(frozen=True)
class GlobalOptimum:
    assignment: Dict[NodeId, NodeId]
    total_us: int
    evaluated: int


def _edge_table(reports: Sequence[MeasurementReport]) -> Dict[NodeId, Dict[NodeId, int]]:
    return {r.eh: {s.oh: ms_to_us(l_meas(s)) for s in r.ok_samples()} for r in reports}


def assignment_total_cost(assignment: Mapping[NodeId, NodeId], reports: Sequence[MeasurementReport],
                          matrix: InterOhLatencyMatrix, loads: Mapping[NodeId, float],
                          w_load: float = 0.0) -> int:
    """
    Total cost of a full assignment in microseconds: pairwise latency over the
    OHs in use plus every EH's edge and load penalty.
    """
    edges = _edge_table(reports)
    used = sorted(set(assignment.values()))
    total = sum(matrix.require_us(a, b) for a, b in itertools.combinations(used, 2))
    for eh, oh in assignment.items():
        if oh not in edges.get(eh, {}):
            raise McastError(f"{eh} has no Ok sample for {oh}", code="INVALID_ASSIGNMENT")
        total += edges[eh][oh] + load_penalty_us(w_load, loads.get(oh, 0.0))
    return total


def global_optimal_assignment(reports: Sequence[MeasurementReport], matrix: InterOhLatencyMatrix,
                              loads: Mapping[NodeId, float], w_load: float = 0.0) -> GlobalOptimum:
    """
    Exhaustive minimum-cost assignment; ties go to the lexicographically
    smallest assignment vector (EHs in NodeId order).

    Raises:
        InstanceTooLargeError: More than 4 OHs or 8 EHs
    """
    ordered = sorted(reports, key=lambda r: r.eh)
    ohs = sorted({s.oh for r in ordered for s in r.samples})
    if len(ohs) > MAX_ORACLE_OH or len(ordered) > MAX_ORACLE_EH:
        raise InstanceTooLargeError(
            f"{len(ohs)} OH / {len(ordered)} EH exceeds {MAX_ORACLE_OH} OH / {MAX_ORACLE_EH} EH"
        )
    edges = _edge_table(ordered)
    choices = [sorted(edges[r.eh]) for r in ordered]
    best: Optional[Tuple[int, Tuple[NodeId, ...]]] = None
    evaluated = 0
    for vector in itertools.product(*choices):
        evaluated += 1
        used = sorted(set(vector))
        try:
            total = sum(matrix.require_us(a, b) for a, b in itertools.combinations(used, 2))
        except MissingLatencyError:
            continue
        for report, oh in zip(ordered, vector):
            total += edges[report.eh][oh] + load_penalty_us(w_load, loads.get(oh, 0.0))
        if best is None or total < best[0]:
            best = (total, vector)
    if best is None:
        raise DistributionRejected("no feasible assignment")
    return GlobalOptimum({r.eh: oh for r, oh in zip(ordered, best[1])}, best[0], evaluated)


def greedy_assignment(reports: Sequence[MeasurementReport], matrix: InterOhLatencyMatrix,
                      loads: Mapping[NodeId, float], w_load: float = 0.0) -> Dict[NodeId, NodeId]:
    """Sequential distribute() over ``reports`` in the given order, from an empty state."""
    state = DistributionState(matrix=matrix, w_load=w_load)
    for oh, load in loads.items():
        state.register_oh(oh, load=load)
    return {r.eh: distribute(r, state).oh for r in reports}


# --- serialized service ----------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    eh: NodeId
    assignment: Optional[Assignment]
    arrival_ms: float
    start_ms: float
    finish_ms: float
    decision_us: float
    measured_us: float = 0.0

    @property
    def response_ms(self) -> float:
        return self.finish_ms - self.arrival_ms


class MonitorService:
    """
    Single decision owner: requests are served one at a time in arrival order.

    Service time is virtual: a fixed per-request overhead plus a cost per
    distribution operation, so simulated response times never read the clock.
    The wall-clock time of each decision is kept apart in ``measured_us``.
    """

    def __init__(self, state: DistributionState, timing: TimingParams):
        self.state = state
        self.timing = timing
        self.busy_until = 0.0
        self.decisions: List[Decision] = []

    def submit(self, report: MeasurementReport, arrival_ms: float) -> Decision:
        start = max(arrival_ms, self.busy_until)
        ops_before = self.state.op_count
        started = time.perf_counter()
        try:
            assignment: Optional[Assignment] = distribute(report, self.state)
        except DistributionRejected:
            assignment = None
        measured_us = (time.perf_counter() - started) * 1e6
        decision_us = (self.state.op_count - ops_before) * self.timing.decision_op_us
        if assignment is not None:
            assignment = assignment.model_copy(update={"decision_us": decision_us})
            self.state.assignments[report.eh] = assignment
        finish = start + self.timing.mh_service_ms + decision_us / 1000.0
        self.busy_until = finish
        decision = Decision(report.eh, assignment, arrival_ms, start, finish, decision_us, measured_us)
        self.decisions.append(decision)
        return decision

    def log_frame(self) -> pd.DataFrame:
        rows = [
            {"eh_id": str(d.eh), "oh_id": str(d.assignment.oh), "cost_ms": d.assignment.cost_ms,
             "decision_us": d.decision_us}
            for d in self.decisions if d.assignment is not None
        ]
        return pd.DataFrame(rows, columns=LOG_COLUMNS)

    def write_log(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.log_frame().to_csv(path, index=False, float_format="%.3f")
        return path


class SimMonitorHost(SimHost):
    """The MH on the simulated network."""

    def __init__(self, net: SimNetwork, node: NodeId, w_load: float = 0.0):
        super().__init__(net, node)
        self.timing = net.timing
        self.state = DistributionState(w_load=w_load)
        self.service = MonitorService(self.state, self.timing)
        self.failures: Dict[NodeId, List[NodeId]] = {}
        self._oh_conns: Dict[NodeId, SimConn] = {}
        self._sweeping = False

    def expect_ohs(self, ohs: Iterable[NodeId]) -> None:
        """Pre-register OHs so silent ones are swept too."""
        for oh in ohs:
            self.state.register_oh(oh, self.net.now())

    def start_sweeper(self) -> None:
        if self._sweeping:
            return
        self._sweeping = True
        self.later(self.timing.load_interval_ms, self._sweep)

    def _sweep(self) -> None:
        released = sweep_stale(self.state, self.net.now(), self.timing.load_interval_ms,
                               self.timing.missed_reports)
        self.failures.update(released)
        self.later(self.timing.load_interval_ms, self._sweep)

    def handle(self, conn: SimConn, msg: wire.Message) -> None:
        sender = conn.peer_of(self.node)
        if isinstance(msg, wire.Hello) and msg.node.role is Role.OH:
            self._oh_conns[msg.node] = conn
            self.state.register_oh(msg.node, self.net.now())
        elif isinstance(msg, wire.LoadReport):
            update_load(sender, msg.load, self.state, self.net.now())
        elif isinstance(msg, wire.LinkReport):
            if msg.latency_us is None:
                self.state.matrix.remove(sender, msg.peer)
            else:
                self.state.matrix.set_us(sender, msg.peer, msg.latency_us)
            self.state.refresh_matrix()
        elif isinstance(msg, wire.MeasReport):
            decision = self.service.submit(msg.report, self.net.now())
            reply = (wire.Assign(decision.assignment.oh) if decision.assignment is not None
                     else wire.Reject("no usable OH"))
            self.later(decision.finish_ms - self.net.now(), lambda: self.send_msg(conn, reply))
