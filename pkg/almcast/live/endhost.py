"""
End host over TCP: directory lookup, concurrent probing, report, attach and stream.
"""

import asyncio
import time
from typing import Dict, List, Optional, Tuple

from ..errors import ConnectionClosedError, McastError
from ..models.measurement import LatencySample, MeasurementReport
from ..models.scenario import NodeId, TimingParams
from ..models.strategy import StrategyConfig, StrategyKind
from ..utils.logger import get_logger
from ..core import wire
from ..core.endhost import PROBES_PER_OH, EhState, build_report, group_ohs
from .transport import FramedConnection

logger = get_logger("almcast.live.endhost")


def _elapsed_ms(started: float) -> float:
    return (time.perf_counter() - started) * 1000.0


class EndHostClient:
    """
    One EH process.

    Args:
        node: This EH
        mh_addr: Monitor address
        timing: Probe timeout, backoff and retry limits
        strategy: Connection strategy used while probing
    """

    def __init__(self, node: NodeId, mh_addr: str, timing: TimingParams,
                 strategy: Optional[StrategyConfig] = None):
        self.node = node
        self.mh_addr = mh_addr
        self.timing = timing
        self.strategy = strategy or StrategyConfig.app_timeout(timing.probe_timeout_ms)
        self.state = EhState.IDLE
        self.assigned_oh: Optional[NodeId] = None
        self.assignments: List[NodeId] = []
        self.reports: List[MeasurementReport] = []
        self.received: List[Tuple[NodeId, int]] = []
        self.streaming = asyncio.Event()
        self._stream_conn: Optional[FramedConnection] = None
        self._directory: Dict[NodeId, str] = {}
        self._next_msg_id = 0
        self._task: Optional[asyncio.Task] = None
        self._stopped = False

    @property
    def is_streaming(self) -> bool:
        return self.state is EhState.STREAMING

    # --- monitor exchange ---------------------------------------------------

    async def _monitor_call(self, first: Optional[wire.Message], expect: tuple) -> List[wire.Message]:
        """Send Hello (+ ``first``) to the MH and wait for one reply of each ``expect`` type."""
        replies: "asyncio.Queue[wire.Message]" = asyncio.Queue()

        async def collect(_conn: FramedConnection, msg: wire.Message) -> None:
            await replies.put(msg)

        conn = await FramedConnection.open(self.mh_addr, self.timing.os_cap_ms)
        conn.serve(collect)
        try:
            await conn.send(wire.Hello(self.node))
            if first is not None:
                await conn.send(first)
            out = []
            timeout = self.timing.os_cap_ms / 1000.0
            while len(out) < len(expect):
                msg = await asyncio.wait_for(replies.get(), timeout)
                if isinstance(msg, expect[len(out)]):
                    out.append(msg)
            return out
        finally:
            await conn.close()

    async def fetch_directory(self) -> Dict[NodeId, str]:
        (directory,) = await self._monitor_call(None, (wire.Directory,))
        self._directory = dict(directory.entries)
        return self._directory

    async def request_assignment(self, report: MeasurementReport) -> Optional[NodeId]:
        """Assigned OH, or None when the MH rejected the report."""
        _, reply = await self._monitor_call(
            wire.MeasReport(report), (wire.Directory, (wire.Assign, wire.Reject))
        )
        if isinstance(reply, wire.Reject):
            logger.debug(f"{self.node}: rejected ({reply.reason})")
            return None
        return reply.oh

    # --- measurement --------------------------------------------------------

    async def _probe(self, oh: NodeId, addr: str) -> LatencySample:
        strategy = self.strategy.effective
        timeout = strategy.app_timeout_ms or self.timing.os_cap_ms
        conn_ms = 0.0
        attempts = 0
        while True:
            attempts += 1
            started = time.perf_counter()
            try:
                conn = await FramedConnection.open(addr, timeout)
                conn_ms += _elapsed_ms(started)
                break
            except asyncio.TimeoutError:
                conn_ms += _elapsed_ms(started)
                timed_out = strategy.app_timeout_ms is not None
            except OSError:
                conn_ms += _elapsed_ms(started)
                timed_out = False
            if strategy.kind is StrategyKind.BASELINE and attempts < strategy.max_attempts:
                continue
            return LatencySample.timed_out(oh, conn_ms) if timed_out else LatencySample.conn_failed(oh, conn_ms)

        async def ignore(_conn: FramedConnection, _msg: wire.Message) -> None:
            return None

        conn.serve(ignore)
        lats: List[float] = []
        try:
            for _ in range(PROBES_PER_OH):
                rtt = await conn.ping(self.timing.probe_timeout_ms)
                if rtt is None:
                    return LatencySample.timed_out(oh, conn_ms + sum(lats) + self.timing.probe_timeout_ms)
                lats.append(rtt)
        except ConnectionClosedError:
            return LatencySample.conn_failed(oh, conn_ms + sum(lats))
        finally:
            await conn.close()
        return LatencySample.ok(oh, conn_ms, *lats)

    async def measure(self, directory: Optional[Dict[NodeId, str]] = None) -> MeasurementReport:
        """
        Probe the directory concurrently (this EH's group only when partitioned).

        Raises:
            McastError: The directory is empty
        """
        directory = directory if directory is not None else self._directory
        if not directory:
            raise McastError(f"{self.node}: no OH to measure", code="NO_OHS")
        self.state = EhState.MEASURING
        ohs = group_ohs(self.node, sorted(directory), min(self.strategy.groups, len(directory)))
        samples = await asyncio.gather(*(self._probe(oh, directory[oh]) for oh in ohs))
        report = build_report(self.node, samples)
        self.reports.append(report)
        return report

    # --- join / stream ------------------------------------------------------

    async def join(self) -> NodeId:
        """
        Directory, measure, report and attach; retries with backoff.

        Raises:
            McastError: No assignment after the configured number of attempts
        """
        for attempt in range(self.timing.mh_retry_attempts):
            if attempt:
                await asyncio.sleep(self.timing.backoff_ms(attempt - 1) / 1000.0)
            try:
                directory = await self.fetch_directory()
                if not directory:
                    continue
                report = await self.measure(directory)
                if not report.usable:
                    continue
                self.state = EhState.REPORTING
                oh = await self.request_assignment(report)
                if oh is None:
                    continue
                self.assignments.append(oh)
                if await self._attach(oh):
                    return oh
            except (OSError, asyncio.TimeoutError, ConnectionClosedError) as e:
                logger.debug(f"{self.node}: join attempt {attempt + 1} failed ({e})")
        self.state = EhState.FAILED
        raise McastError(f"{self.node}: could not join", code="JOIN_FAILED")

    async def _attach(self, oh: NodeId) -> bool:
        self.state = EhState.CONNECTING
        addr = self._directory.get(oh)
        if addr is None:
            return False
        try:
            conn = await FramedConnection.open(addr, self.timing.probe_timeout_ms)
            conn.peer_node = oh
            await conn.send(wire.Hello(self.node))
        except (OSError, asyncio.TimeoutError, ConnectionClosedError) as e:
            logger.debug(f"{self.node}: attach to {oh} failed ({e})")
            return False
        self._stream_conn = conn
        conn.serve(self._on_stream_msg, self._on_stream_close)
        self.assigned_oh = oh
        self.state = EhState.STREAMING
        self.streaming.set()
        logger.info(f"{self.node}: streaming via {oh}")
        return True

    async def _on_stream_msg(self, conn: FramedConnection, msg: wire.Message) -> None:
        if isinstance(msg, wire.Data):
            self.received.append((msg.origin, msg.msg_id))

    def _on_stream_close(self, conn: FramedConnection) -> None:
        if self._stopped or conn is not self._stream_conn:
            return
        self._stream_conn = None
        self.streaming.clear()
        self.state = EhState.CONNECTING
        logger.info(f"{self.node}: lost stream to {self.assigned_oh}")
        self._task = asyncio.create_task(self._recover(self.assigned_oh))

    async def _recover(self, oh: NodeId) -> None:
        for _ in range(self.timing.stream_reconnect_attempts):
            await asyncio.sleep(self.timing.reconnect_base_ms / 1000.0)
            if await self._attach(oh):
                return
        try:
            await self.join()
        except McastError as e:
            logger.error(str(e))

    async def send_data(self, payload: bytes = b"") -> int:
        """
        Raises:
            McastError: Not streaming
        """
        if not self.is_streaming or self._stream_conn is None:
            raise McastError(f"{self.node} is not streaming", code="NOT_STREAMING")
        self._next_msg_id += 1
        await self._stream_conn.send(wire.Data(self._next_msg_id, self.node, wire.Hop.SOURCE, payload))
        return self._next_msg_id

    async def stop(self) -> None:
        self._stopped = True
        if self._task is not None:
            self._task.cancel()
        if self._stream_conn is not None:
            await self._stream_conn.close()
