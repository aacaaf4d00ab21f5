"""
End-host measurement: probing OHs, M_i, connection strategies, sub-group
partitioning and the join / rejoin flow.
"""

from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

from ..errors import McastError
from ..models.measurement import LatencySample, MeasurementReport
from ..models.scenario import NodeId
from ..models.strategy import StrategyConfig, StrategyKind
from ..utils.logger import get_logger
from . import wire
from .simnet import APP_TIMEOUT, ConnResult, SimConn, SimHost, SimNetwork

logger = get_logger("almcast.endhost")

PROBES_PER_OH = 3

T = TypeVar("T")


def cumm_lat(sample: LatencySample) -> float:
    """Sum of the three probe round trips."""
    if not sample.is_ok:
        raise McastError(f"sample for {sample.oh} is {sample.status.value}, no latencies", code="NOT_OK")
    lat1, lat2, lat3 = sample.lat_ms
    return lat1 + lat2 + lat3


def l_meas(sample: LatencySample) -> float:
    """EH-OH edge latency used by distribution: mean probe round trip."""
    return cumm_lat(sample) / PROBES_PER_OH


def compute_mi(samples: Iterable[LatencySample]) -> float:
    """
    Total measurement time: the max over samples of conn + CummLat, where a
    failed sample contributes its elapsed time.
    """
    totals = [s.total_ms for s in samples]
    if not totals:
        raise McastError("compute_mi needs at least one sample", code="EMPTY")
    return max(totals)


def build_report(eh: NodeId, samples: Sequence[LatencySample]) -> MeasurementReport:
    return MeasurementReport(eh=eh, samples=tuple(samples), m_i_ms=compute_mi(samples))


def tested_percentage(reports: Iterable[MeasurementReport]) -> float:
    """Share of (EH, OH) probes that ended Ok, in percent."""
    total = ok = 0
    for report in reports:
        total += len(report.samples)
        ok += sum(1 for s in report.samples if s.is_ok)
    return 100.0 * ok / total if total else 100.0


def _round_robin(items: Sequence[T], groups: int) -> List[List[T]]:
    buckets: List[List[T]] = [[] for _ in range(groups)]
    for i, item in enumerate(sorted(items)):
        buckets[i % groups].append(item)
    return buckets


def partition(ehs: Sequence[NodeId], ohs: Sequence[NodeId],
              group_count: int) -> List[Tuple[List[NodeId], List[NodeId]]]:
    """
    Split EHs and OHs into ``group_count`` disjoint sub-groups.

    Both lists are dealt round-robin in NodeId order, so earlier groups take
    the remainders. Group i's EHs probe only group i's OHs.

    Raises:
        McastError: group_count < 1 or larger than the OH count
    """
    if group_count < 1:
        raise McastError(f"group_count must be >= 1, got {group_count}", code="PARTITION")
    if group_count > len(ohs):
        raise McastError(f"cannot split {len(ohs)} OHs into {group_count} groups", code="PARTITION")
    return list(zip(_round_robin(ehs, group_count), _round_robin(ohs, group_count)))


def group_ohs(eh: NodeId, ohs: Sequence[NodeId], group_count: int) -> List[NodeId]:
    """
    OHs a single EH probes without knowing the other EHs.

    Matches ``partition`` when EH ids run 0..n-1: the EH lands in group
    ``eh.id % group_count``.
    """
    if group_count == 1:
        return sorted(ohs)
    if group_count < 1 or group_count > len(ohs):
        raise McastError(f"cannot split {len(ohs)} OHs into {group_count} groups", code="PARTITION")
    return _round_robin(ohs, group_count)[eh.id % group_count]


def probe_targets(ehs: Sequence[NodeId], ohs: Sequence[NodeId],
                  strategy: StrategyConfig) -> Dict[NodeId, List[NodeId]]:
    """OHs each EH measures under ``strategy`` (all of them unless partitioned)."""
    if strategy.groups == 1:
        return {eh: sorted(ohs) for eh in ehs}
    targets: Dict[NodeId, List[NodeId]] = {}
    for group_ehs, group_ohs in partition(ehs, ohs, strategy.groups):
        for eh in group_ehs:
            targets[eh] = group_ohs
    return targets


class EhState(str, Enum):
    IDLE = "idle"
    MEASURING = "measuring"
    REPORTING = "reporting"
    CONNECTING = "connecting"
    STREAMING = "streaming"
    FAILED = "failed"


class _Sampling:
    """
    One EH->OH sample: connect under the strategy, then three pings on the
    same connection.
    """

    __slots__ = ("host", "oh", "strategy", "done", "conn_ms", "attempts", "conn", "lats")

    def __init__(self, host: "SimEndHost", oh: NodeId, strategy: StrategyConfig,
                 done: Callable[[LatencySample], None]):
        self.host = host
        self.oh = oh
        self.strategy = strategy
        self.done = done
        self.conn_ms = 0.0
        self.attempts = 0
        self.conn: Optional[SimConn] = None
        self.lats: List[float] = []

    def connect(self) -> None:
        self.attempts += 1
        host = self.host
        host.net.connect(host.node, self.oh, self.on_conn, app_timeout_ms=self.strategy.app_timeout_ms)

    def on_conn(self, res: ConnResult) -> None:
        self.conn_ms += res.elapsed_ms
        if res.ok:
            self.conn = res.conn
            self.host.ping(res.conn, self.on_rtt, self.host.timing.probe_timeout_ms)
        elif self.strategy.kind is StrategyKind.BASELINE and self.attempts < self.strategy.max_attempts:
            self.connect()
        elif res.reason == APP_TIMEOUT:
            self.done(LatencySample.timed_out(self.oh, self.conn_ms))
        else:
            self.done(LatencySample.conn_failed(self.oh, self.conn_ms))

    def on_rtt(self, rtt: Optional[float]) -> None:
        host = self.host
        timeout = host.timing.probe_timeout_ms
        if rtt is None:
            host.net.close(self.conn, by=host.node)
            self.done(LatencySample.timed_out(self.oh, self.conn_ms + sum(self.lats) + timeout))
            return
        self.lats.append(rtt)
        if len(self.lats) < PROBES_PER_OH:
            host.ping(self.conn, self.on_rtt, timeout)
            return
        host.net.close(self.conn, by=host.node)
        self.done(LatencySample.ok(self.oh, self.conn_ms, *self.lats))


class SimEndHost(SimHost):
    """
    An EH on the simulated network.

    Args:
        net: Simulated network
        node: This EH
        mh: Monitor to report to (needed only for :meth:`join_and_stream`)
    """

    def __init__(self, net: SimNetwork, node: NodeId, mh: Optional[NodeId] = None):
        super().__init__(net, node)
        self.mh = mh
        self.timing = net.timing
        self.state = EhState.IDLE
        self.reports: List[MeasurementReport] = []
        self.assigned_oh: Optional[NodeId] = None
        self.assignments: List[NodeId] = []
        self.received: List[Tuple[NodeId, int]] = []
        self.measure_count = 0
        self.stream_reconnects = 0
        self.streaming_since: Optional[float] = None
        self.last_phase_ms: Optional[float] = None
        self._stream_conn: Optional[SimConn] = None
        self._mh_conn: Optional[SimConn] = None
        self._next_msg_id = 0
        self._join_ohs: List[NodeId] = []
        self._strategy = StrategyConfig()
        self._on_streaming: Optional[Callable[["SimEndHost"], None]] = None
        self._unusable = 0
        self._mh_tries = 0

    # --- measurement --------------------------------------------------------

    def measure_all(self, ohs: Iterable[NodeId], strategy: StrategyConfig,
                    on_done: Callable[[MeasurementReport], None]) -> None:
        """
        Probe every OH concurrently and hand the assembled report to ``on_done``.

        Raises:
            McastError: ``ohs`` is empty
        """
        targets = sorted(set(ohs))
        if not targets:
            raise McastError(f"{self.node}: nothing to measure", code="NO_OHS")
        effective = strategy.effective
        samples: Dict[NodeId, LatencySample] = {}
        started = self.net.now()

        def finished(sample: LatencySample) -> None:
            samples[sample.oh] = sample
            if len(samples) == len(targets):
                self.last_phase_ms = self.net.now() - started
                on_done(build_report(self.node, [samples[o] for o in targets]))

        for oh in targets:
            _Sampling(self, oh, effective, finished).connect()

    # --- join / stream ------------------------------------------------------

    def join_and_stream(self, ohs: Iterable[NodeId], strategy: StrategyConfig,
                        on_streaming: Optional[Callable[["SimEndHost"], None]] = None) -> None:
        """Measure, report to the MH, attach to the assigned OH and stream."""
        if self.mh is None:
            raise McastError(f"{self.node}: no monitor configured", code="NO_MONITOR")
        self._join_ohs = sorted(ohs)
        self._strategy = strategy
        self._on_streaming = on_streaming
        self._unusable = 0
        self._rejoin()

    def _rejoin(self) -> None:
        self.state = EhState.MEASURING
        self.assigned_oh = None
        self.measure_count += 1
        self.measure_all(self._join_ohs, self._strategy, self._on_report)

    def _on_report(self, report: MeasurementReport) -> None:
        self.reports.append(report)
        if not report.usable:
            self._unusable += 1
            if self._unusable >= self.timing.mh_retry_attempts:
                self._fail("no OH answered")
                return
            logger.debug(f"{self.node}: unusable report, measuring again")
            self.later(self.timing.backoff_ms(self._unusable - 1), self._rejoin)
            return
        self.state = EhState.REPORTING
        self._mh_tries = 0
        self._send_report(report)

    def _send_report(self, report: MeasurementReport) -> None:
        self._mh_tries += 1

        def done(res: ConnResult) -> None:
            if not res.ok:
                if self._mh_tries >= self.timing.mh_retry_attempts:
                    self._fail(f"monitor unreachable ({res.reason})")
                    return
                self.later(self.timing.backoff_ms(self._mh_tries - 1), lambda: self._send_report(report))
                return
            self._mh_conn = res.conn
            self.send_msg(res.conn, wire.Hello(self.node))
            self.send_msg(res.conn, wire.MeasReport(report))

        self.net.connect(self.node, self.mh, done)

    def _fail(self, reason: str) -> None:
        self.state = EhState.FAILED
        logger.warning(f"{self.node}: giving up ({reason})")

    def handle(self, conn: SimConn, msg: wire.Message) -> None:
        if isinstance(msg, wire.Assign) and conn is self._mh_conn:
            self._mh_conn = None
            self.net.close(conn, by=self.node)
            self.assignments.append(msg.oh)
            self._attach(msg.oh, retries_left=0)
        elif isinstance(msg, wire.Reject) and conn is self._mh_conn:
            self._mh_conn = None
            self.net.close(conn, by=self.node)
            logger.debug(f"{self.node}: rejected ({msg.reason}), measuring again")
            self._rejoin()
        elif isinstance(msg, wire.Data) and conn is self._stream_conn:
            self.received.append((msg.origin, msg.msg_id))

    def _attach(self, oh: NodeId, retries_left: int) -> None:
        self.state = EhState.CONNECTING

        def done(res: ConnResult) -> None:
            if res.ok:
                self._stream_conn = res.conn
                self.assigned_oh = oh
                self.state = EhState.STREAMING
                self.streaming_since = self.net.now()
                self.send_msg(res.conn, wire.Hello(self.node))
                if self._on_streaming is not None:
                    self._on_streaming(self)
            elif retries_left > 0:
                self.later(self.timing.reconnect_base_ms, lambda: self._attach(oh, retries_left - 1))
            else:
                logger.debug(f"{self.node}: {oh} unreachable ({res.reason}), rejoining")
                self._rejoin()

        self.net.connect(self.node, oh, done, app_timeout_ms=self.timing.probe_timeout_ms)

    def on_close(self, conn: SimConn) -> None:
        if conn is self._stream_conn:
            self._stream_conn = None
            oh = self.assigned_oh
            self.stream_reconnects += 1
            logger.debug(f"{self.node}: lost stream to {oh}, retrying it first")
            self.state = EhState.CONNECTING
            if self.timing.stream_reconnect_attempts > 0:
                self.later(self.timing.reconnect_base_ms,
                           lambda: self._attach(oh, self.timing.stream_reconnect_attempts - 1))
            else:
                self._rejoin()
        elif conn is self._mh_conn:
            # monitor dropped us before answering
            self._mh_conn = None
            report = self.reports[-1]
            if self._mh_tries >= self.timing.mh_retry_attempts:
                self._fail("monitor closed the connection")
            else:
                self.later(self.timing.backoff_ms(self._mh_tries - 1), lambda: self._send_report(report))

    # --- data ---------------------------------------------------------------

    @property
    def is_streaming(self) -> bool:
        return self.state is EhState.STREAMING

    def send_data(self, payload: bytes = b"") -> int:
        """
        Publish a message through the assigned OH.

        Raises:
            McastError: Not streaming
        """
        if not self.is_streaming or self._stream_conn is None:
            raise McastError(f"{self.node} is not streaming", code="NOT_STREAMING")
        self._next_msg_id += 1
        self.send_msg(self._stream_conn, wire.Data(self._next_msg_id, self.node, wire.Hop.SOURCE, payload))
        return self._next_msg_id
