"""
Overlay host over TCP: complete-graph construction with duplicate
elimination, one-hop forwarding and load reporting to the monitor.
"""

import asyncio
import time
from typing import Callable, Dict, List, Mapping, Optional, Set

from ..errors import ConnectionClosedError
from ..models.scenario import NodeId, Role, TimingParams
from ..utils.logger import get_logger
from ..core import wire
from ..core.overlay import Direction, PeerConn, RecentMessages, forward, resolve_duplicate, to_us
from .transport import FramedConnection, parse_addr, start_listener


class CpuLoadSampler:
    """
    Process CPU share since the previous sample, clamped to [0, 1].

    The first sample covers the time since construction.
    """

    def __init__(self, cpu_clock: Callable[[], float] = time.process_time,
                 wall_clock: Callable[[], float] = time.monotonic):
        self._cpu_clock = cpu_clock
        self._wall_clock = wall_clock
        self._cpu = cpu_clock()
        self._wall = wall_clock()

    def sample(self) -> float:
        cpu, wall = self._cpu_clock(), self._wall_clock()
        elapsed = wall - self._wall
        share = (cpu - self._cpu) / elapsed if elapsed > 0 else 0.0
        self._cpu, self._wall = cpu, wall
        return min(1.0, max(0.0, share))


def parse_peers(text: str) -> Dict[NodeId, str]:
    """
    Comma-separated OH addresses. Entry i is oh<i> unless written ``<id>=<host:port>``.

    Raises:
        ValueError: Malformed entry or address
    """
    peers: Dict[NodeId, str] = {}
    items = [item.strip() for item in text.split(",") if item.strip()]
    for i, item in enumerate(items):
        pid, eq, addr = item.rpartition("=")
        if eq and not pid.isdigit():
            raise ValueError(f"peer must be <host:port> or <id>=<host:port>, got '{item}'")
        parse_addr(addr)
        peers[NodeId.oh(int(pid) if eq else i)] = addr
    return peers


class _LivePair:
    __slots__ = ("peer", "out_conn", "out_done", "out_us", "in_conn", "peer_done", "peer_us",
                 "sent", "decided")

    def __init__(self, peer: NodeId, out_done: bool = False):
        self.peer = peer
        self.out_conn: Optional[FramedConnection] = None
        self.out_done = out_done
        self.out_us: Optional[int] = None
        self.in_conn: Optional[FramedConnection] = None
        self.peer_done = False
        self.peer_us: Optional[int] = None
        self.sent = False
        self.decided = False


class OverlayNode:
    """
    One OH process.

    Args:
        node: This OH
        listen: ``host:port`` for peers and EHs
        timing: Probe timeout, report interval and reconnect backoff
        mh_addr: Monitor address, or None to run without reporting
        peers: Peer OH addresses; when omitted they come from the monitor's directory
        load: Fixed load level to report; None samples the process CPU share
    """

    def __init__(self, node: NodeId, listen: str, timing: TimingParams, mh_addr: Optional[str] = None,
                 peers: Optional[Mapping[NodeId, str]] = None, load: Optional[float] = None):
        self.node = node
        self.listen = listen
        self.timing = timing
        self.mh_addr = mh_addr
        self.load = load
        self.load_sampler = CpuLoadSampler()
        self.logger = get_logger("almcast.live.overlay")
        self.peer_addrs: Dict[NodeId, str] = {p: a for p, a in (peers or {}).items() if p != node}
        self.peers: Dict[NodeId, PeerConn] = {}
        self.local_ehs: Dict[NodeId, FramedConnection] = {}
        self.absent: Set[NodeId] = set()
        self.lost_peers: Set[NodeId] = set()
        self.recent = RecentMessages()
        self.built = asyncio.Event()
        self._pairs: Dict[NodeId, _LivePair] = {}
        self._conns: Set[FramedConnection] = set()
        self._tasks: List[asyncio.Task] = []
        self._reconnecting: Set[NodeId] = set()
        self._mh_conn: Optional[FramedConnection] = None
        self._directory: Optional[asyncio.Future] = None
        self._server: Optional[asyncio.AbstractServer] = None
        self._stopped = False

    # --- lifecycle ----------------------------------------------------------

    async def start(self) -> None:
        """Register the known peers and start accepting connections."""
        for peer in self.peer_addrs:
            self._pairs.setdefault(peer, _LivePair(peer))
        self._server = await start_listener(self.listen, self._accepted)
        self.logger.info(f"{self.node} listening on {self.listen}")

    async def run(self) -> None:
        """Start, report to the monitor, build the graph and serve until cancelled."""
        await self.start()
        try:
            if self.mh_addr is not None:
                await self.connect_monitor()
            await self.build()
            await asyncio.Event().wait()
        finally:
            await self.stop()

    async def stop(self) -> None:
        """Crash-stop: close the listener and every connection."""
        self._stopped = True
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for conn in list(self._conns):
            await conn.close()
        self._conns.clear()
        self.logger.info(f"{self.node} stopped")

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.create_task(coro)
        self._tasks.append(task)
        task.add_done_callback(lambda t: self._tasks.remove(t) if t in self._tasks else None)
        return task

    def _track(self, conn: FramedConnection) -> FramedConnection:
        self._conns.add(conn)
        conn.serve(self._handle, self._on_close)
        return conn

    def _accepted(self, conn: FramedConnection) -> None:
        if self._stopped:
            self._spawn(conn.close())
            return
        self._track(conn)

    # --- monitor ------------------------------------------------------------

    async def connect_monitor(self) -> None:
        """Connect to the MH, learn the directory if no peers were given, start reporting."""
        conn = await FramedConnection.open(self.mh_addr, self.timing.os_cap_ms)
        conn.peer_node = NodeId.mh(0)
        self._mh_conn = self._track(conn)
        self._directory = asyncio.get_running_loop().create_future()
        await conn.send(wire.Hello(self.node, self.listen))
        await conn.send(wire.LoadReport.from_load(self.current_load()))
        if not self.peer_addrs:
            directory = await asyncio.wait_for(self._directory, self.timing.probe_timeout_ms / 1000.0)
            for oh, addr in directory.entries:
                if oh != self.node:
                    self.peer_addrs[oh] = addr
                    self._pairs.setdefault(oh, _LivePair(oh))
        self._spawn(self._report_loop())

    async def _report_loop(self) -> None:
        while True:
            await asyncio.sleep(self.timing.load_interval_ms / 1000.0)
            if self._mh_conn is None or not self._mh_conn.is_open:
                try:
                    await self.connect_monitor()
                except (OSError, asyncio.TimeoutError, ConnectionClosedError) as e:
                    self.logger.warning(f"{self.node}: monitor unreachable ({e})")
                    continue
                return
            await self._mh_conn.try_send(wire.LoadReport.from_load(self.current_load()))

    def current_load(self) -> float:
        return self.load if self.load is not None else self.load_sampler.sample()

    async def _report_link(self, peer: NodeId, latency_us: Optional[int]) -> None:
        if self._mh_conn is not None and self._mh_conn.is_open:
            await self._mh_conn.try_send(wire.LinkReport(peer, latency_us))

    # --- complete graph -----------------------------------------------------

    async def build(self) -> None:
        """Connect to every known peer; returns once each pair is kept or given up."""
        for peer in sorted(self.peer_addrs):
            pair = self._pairs.setdefault(peer, _LivePair(peer))
            if not pair.out_done and pair.out_conn is None:
                self._spawn(self._connect_out(pair))
        deadline = (self.timing.os_cap_ms + 2 * self.timing.probe_timeout_ms) / 1000.0
        self._check_built()
        try:
            await asyncio.wait_for(self.built.wait(), deadline)
        except asyncio.TimeoutError:
            for peer, pair in sorted(self._pairs.items()):
                if not pair.decided:
                    self.logger.warning(f"{self.node}: no usable connection to {peer}, pair left out")
                    pair.decided = True
                    self.absent.add(peer)
            self._check_built()

    async def _connect_out(self, pair: _LivePair) -> None:
        try:
            conn = await FramedConnection.open(self.peer_addrs[pair.peer], self.timing.os_cap_ms)
            conn.peer_node = pair.peer
            self._track(conn)
            pair.out_conn = conn
            await conn.send(wire.Hello(self.node, self.listen))
            rtt = await conn.ping(self.timing.probe_timeout_ms)
            pair.out_us = to_us(rtt) if rtt is not None else None
        except (OSError, asyncio.TimeoutError, ConnectionClosedError) as e:
            self.logger.debug(f"{self.node}: outgoing to {pair.peer} failed ({e})")
            pair.out_us = None
        pair.out_done = True
        await self._send_meas(pair)

    async def _send_meas(self, pair: _LivePair) -> None:
        if pair.out_done and not pair.sent:
            for conn in (pair.out_conn, pair.in_conn):
                if conn is not None and conn.is_open and await conn.try_send(wire.PeerMeas(pair.out_us)):
                    pair.sent = True
                    break
        await self._maybe_decide(pair)

    async def _maybe_decide(self, pair: _LivePair) -> None:
        if pair.decided or not (pair.out_done and pair.sent and pair.peer_done):
            return
        pair.decided = True
        out_ok = pair.out_us is not None and pair.out_conn is not None and pair.out_conn.is_open
        in_ok = pair.peer_us is not None and pair.in_conn is not None and pair.in_conn.is_open
        if not out_ok and not in_ok:
            self.absent.add(pair.peer)
            self._check_built()
            return
        keep = resolve_duplicate(pair.out_us if out_ok else None, pair.peer_us if in_ok else None,
                                 self.node, pair.peer)
        if keep is Direction.OUTGOING:
            kept, latency_us = pair.out_conn, pair.out_us
        else:
            kept, latency_us = pair.in_conn, pair.peer_us
            if pair.out_conn is not None and pair.out_conn.is_open:
                await pair.out_conn.close()
        self.peers[pair.peer] = PeerConn(pair.peer, keep, kept, latency_us / 1000.0)
        self.absent.discard(pair.peer)
        self.lost_peers.discard(pair.peer)
        self.logger.debug(f"{self.node}: keeping {keep.value} connection to {pair.peer} "
                          f"({latency_us / 1000.0:.3f} ms)")
        await self._report_link(pair.peer, latency_us)
        self._check_built()

    def _check_built(self) -> None:
        if self.built.is_set():
            return
        if all(p in self.peers or p in self.absent for p in self.peer_addrs):
            self.built.set()
            self.logger.success(f"{self.node}: complete graph ready ({len(self.peers)} peers)")

    # --- connection events --------------------------------------------------

    async def _handle(self, conn: FramedConnection, msg: wire.Message) -> None:
        if isinstance(msg, wire.Hello):
            conn.peer_node = msg.node
            if msg.node.role is Role.EH:
                self.local_ehs[msg.node] = conn
                self.logger.debug(f"{self.node}: {msg.node} streaming")
            elif msg.node.role is Role.OH:
                await self._peer_hello(conn, msg)
        elif isinstance(msg, wire.PeerMeas):
            pair = self._pairs.get(conn.peer_node)
            if pair is None or pair.decided:
                return
            pair.peer_done = True
            pair.peer_us = msg.latency_us
            if pair.in_conn is None and conn is not pair.out_conn:
                pair.in_conn = conn
            await self._send_meas(pair)
        elif isinstance(msg, wire.Directory):
            if self._directory is not None and not self._directory.done():
                self._directory.set_result(msg)
        elif isinstance(msg, wire.Data):
            await self._on_data(conn, msg)
        elif isinstance(msg, wire.Bye):
            await conn.close()

    async def _peer_hello(self, conn: FramedConnection, msg: wire.Hello) -> None:
        peer = msg.node
        if msg.listen:
            self.peer_addrs.setdefault(peer, msg.listen)
        pair = self._pairs.get(peer)
        if pair is None or pair.decided:
            # peer (re)connecting on its own: single incoming connection
            old = self.peers.pop(peer, None)
            if old is not None and old.conn.is_open and old.conn is not conn:
                await old.conn.close()
            pair = self._pairs[peer] = _LivePair(peer, out_done=True)
        if pair.in_conn is not None and pair.in_conn.is_open:
            await conn.close()
            return
        pair.in_conn = conn
        await self._send_meas(pair)

    def _on_close(self, conn: FramedConnection) -> None:
        self._conns.discard(conn)
        if self._stopped:
            return
        peer = conn.peer_node
        if peer is None:
            return
        if peer.role is Role.EH:
            if self.local_ehs.get(peer) is conn:
                del self.local_ehs[peer]
            return
        if peer.role is Role.MH:
            self._mh_conn = None
            return
        pair = self._pairs.get(peer)
        if pair is not None and not pair.decided:
            if conn is pair.in_conn:
                pair.in_conn = None
            self._spawn(self._send_meas(pair))
            return
        kept = self.peers.get(peer)
        if kept is not None and kept.conn is conn:
            del self.peers[peer]
            self.logger.info(f"{self.node}: connection to {peer} lost")
            if self.node < peer:
                self._spawn(self.reconnect_peer(peer))

    async def reconnect_peer(self, peer: NodeId) -> None:
        """Lower id of a pair re-establishes a lost connection with exponential backoff."""
        if peer in self._reconnecting:
            return
        self._reconnecting.add(peer)
        try:
            for retry in range(self.timing.reconnect_max_retries):
                await asyncio.sleep(self.timing.backoff_ms(retry) / 1000.0)
                if peer in self.peers:
                    return
                pair = self._pairs[peer] = _LivePair(peer)
                await self._connect_out(pair)
                for _ in range(50):
                    if pair.decided:
                        break
                    await asyncio.sleep(self.timing.probe_timeout_ms / 50_000.0)
                if peer in self.peers:
                    self.logger.info(f"{self.node}: reconnected to {peer}")
                    return
            self.lost_peers.add(peer)
            self.logger.warning(f"{self.node}: giving up on {peer}")
            await self._report_link(peer, None)
        finally:
            self._reconnecting.discard(peer)

    # --- data path ----------------------------------------------------------

    async def _on_data(self, conn: FramedConnection, msg: wire.Data) -> None:
        if not self.recent.record(msg):
            return
        # snapshot: connections may close while a send below is awaiting
        oh_conns = {p: pc.conn for p, pc in self.peers.items()}
        eh_conns = dict(self.local_ehs)
        plan = forward(msg, self.node, oh_conns if msg.hop is wire.Hop.SOURCE else {}, eh_conns)
        for target, out in plan.deliveries:
            target_conn = oh_conns[target] if target.role is Role.OH else eh_conns[target]
            await target_conn.try_send(out)
