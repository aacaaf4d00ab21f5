"""
Monitor host over TCP.

Reports are queued and decided one at a time by a single worker task;
load and link reports update the shared state directly since they only
ever run between two decisions on the event loop.
"""

import asyncio
import time
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

import aiofiles

from ..errors import DistributionRejected
from ..models.measurement import Assignment, MeasurementReport
from ..models.scenario import NodeId, Role, TimingParams
from ..utils.logger import get_logger
from ..core import wire
from ..core.monitor import LOG_COLUMNS, DistributionState, distribute, sweep_stale, update_load
from .transport import FramedConnection, start_listener


class MonitorServer:
    """
    The MH process.

    Args:
        node: MH id
        listen: ``host:port`` to accept OH and EH connections on
        timing: Load interval and missed-report threshold for the sweeper
        w_load: Load penalty weight
        log_path: Optional assignment log (CSV, appended)
    """

    def __init__(self, node: NodeId, listen: str, timing: TimingParams, w_load: float = 0.0,
                 log_path: Optional[Path] = None):
        self.node = node
        self.listen = listen
        self.timing = timing
        self.log_path = log_path
        self.logger = get_logger("almcast.live.monitor")
        self.state = DistributionState(w_load=w_load)
        self.addresses: Dict[NodeId, str] = {}
        self.decisions: List[Assignment] = []
        self.released: Dict[NodeId, List[NodeId]] = {}
        self._queue: "asyncio.Queue[Tuple[FramedConnection, MeasurementReport]]" = asyncio.Queue()
        self._conns: Set[FramedConnection] = set()
        self._tasks: List[asyncio.Task] = []
        self._server: Optional[asyncio.AbstractServer] = None
        self._started = time.monotonic()

    def now_ms(self) -> float:
        return (time.monotonic() - self._started) * 1000.0

    async def start(self) -> None:
        if self.log_path is not None:
            await self._init_log()
        self._server = await start_listener(self.listen, self._accepted)
        self._tasks.append(asyncio.create_task(self._decide_loop()))
        self._tasks.append(asyncio.create_task(self._sweep_loop()))
        self.logger.info(f"monitor {self.node} listening on {self.listen}")

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for conn in list(self._conns):
            await conn.close()

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Event().wait()
        finally:
            await self.stop()

    def _accepted(self, conn: FramedConnection) -> None:
        self._conns.add(conn)
        conn.serve(self._handle, self._conns.discard)

    async def _handle(self, conn: FramedConnection, msg: wire.Message) -> None:
        if isinstance(msg, wire.Hello):
            conn.peer_node = msg.node
            if msg.node.role is Role.OH:
                self.state.register_oh(msg.node, self.now_ms())
                update_load(msg.node, self.state.oh_table[msg.node].reported_load, self.state, self.now_ms())
                if msg.listen:
                    self.addresses[msg.node] = msg.listen
            await conn.try_send(self.directory(exclude=msg.node))
        elif isinstance(msg, wire.LoadReport) and conn.peer_node is not None:
            update_load(conn.peer_node, msg.load, self.state, self.now_ms())
        elif isinstance(msg, wire.LinkReport) and conn.peer_node is not None:
            if msg.latency_us is None:
                self.state.matrix.remove(conn.peer_node, msg.peer)
            else:
                self.state.matrix.set_us(conn.peer_node, msg.peer, msg.latency_us)
            self.state.refresh_matrix()
        elif isinstance(msg, wire.MeasReport):
            await self._queue.put((conn, msg.report))

    def directory(self, exclude: Optional[NodeId] = None) -> wire.Directory:
        """Alive OHs with a known listen address."""
        entries = tuple(
            (oh, self.addresses[oh]) for oh in self.state.alive_ohs()
            if oh in self.addresses and oh != exclude
        )
        return wire.Directory(entries)

    async def _decide_loop(self) -> None:
        while True:
            conn, report = await self._queue.get()
            started = time.perf_counter()
            try:
                assignment = distribute(report, self.state)
            except DistributionRejected as e:
                self.logger.debug(f"rejecting {report.eh}: {e.message}")
                await conn.try_send(wire.Reject("no usable OH"))
                continue
            decision_us = (time.perf_counter() - started) * 1e6
            assignment = assignment.model_copy(update={"decision_us": decision_us})
            self.state.assignments[report.eh] = assignment
            self.decisions.append(assignment)
            self.logger.info(f"{report.eh} -> {assignment.oh} (cost {assignment.cost_ms:.3f} ms)")
            await conn.try_send(wire.Assign(assignment.oh))
            if self.log_path is not None:
                await self._append_log(assignment)

    async def _sweep_loop(self) -> None:
        interval = self.timing.load_interval_ms
        while True:
            await asyncio.sleep(interval / 1000.0)
            released = sweep_stale(self.state, self.now_ms(), interval, self.timing.missed_reports)
            for oh, ehs in released.items():
                self.logger.warning(f"{oh} missed {self.timing.missed_reports} load reports, "
                                    f"released {len(ehs)} EH(s)")
            self.released.update(released)

    async def _init_log(self) -> None:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        if not self.log_path.exists():
            async with aiofiles.open(self.log_path, "w") as f:
                await f.write(",".join(LOG_COLUMNS) + "\n")

    async def _append_log(self, a: Assignment) -> None:
        async with aiofiles.open(self.log_path, "a") as f:
            await f.write(f"{a.eh},{a.oh},{a.cost_ms:.3f},{a.decision_us:.3f}\n")
