"""
Overlay hosts: complete-graph construction with duplicate elimination,
one-hop forwarding, load reporting and peer reconnect.

The pure rules (:func:`resolve_duplicate`, :func:`forward`) are shared with the
socket mode; :class:`SimOverlayHost` runs them on the simulated network.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Set, Tuple

from ..errors import McastError
from ..models.scenario import NodeId, Role, ScenarioSpec
from ..utils.logger import get_logger
from . import wire
from .simnet import ConnResult, SimConn, SimHost, SimNetwork, Timer

logger = get_logger("almcast.overlay")


class Direction(str, Enum):
    OUTGOING = "outgoing"
    INCOMING = "incoming"


def to_us(ms: float) -> int:
    """Quantize a latency to whole microseconds (at least 1)."""
    return max(1, round(ms * 1000.0))


def resolve_duplicate(
    meas_out: Optional[float],
    meas_in: Optional[float],
    out_initiator: NodeId,
    in_initiator: NodeId,
) -> Direction:
    """
    Pick the connection to keep out of a duplicate pair.

    The lower latency wins; on a tie the direction opened by the lower NodeId
    wins. A direction without a measurement (None) loses to one that has it.

    Raises:
        McastError: Neither direction was measured
    """
    if meas_out is None and meas_in is None:
        raise McastError("neither direction of the pair was measured", code="NO_MEASUREMENT")
    if meas_in is None:
        return Direction.OUTGOING
    if meas_out is None:
        return Direction.INCOMING
    if meas_out < meas_in:
        return Direction.OUTGOING
    if meas_in < meas_out:
        return Direction.INCOMING
    return Direction.OUTGOING if out_initiator < in_initiator else Direction.INCOMING


@dataclass
class PeerConn:
    peer: NodeId
    direction: Direction
    conn: Any
    measured_latency_ms: Optional[float] = None


@dataclass(frozen=True)
class ForwardPlan:
    """Where a data message goes next."""

    deliveries: Tuple[Tuple[NodeId, wire.Data], ...]
    broken_peers: Tuple[NodeId, ...] = ()


def forward(
    msg: wire.Data,
    self_id: NodeId,
    oh_peers: Mapping[NodeId, Any],
    local_ehs: Iterable[NodeId],
) -> ForwardPlan:
    """
    One-hop forwarding rule.

    A message from a local EH goes to every peer OH (re-marked as a peer hop)
    and to every other local EH. A message from a peer OH goes to local EHs only.
    Peers whose connection is missing or closed are reported as broken.
    """
    deliveries: List[Tuple[NodeId, wire.Data]] = []
    broken: List[NodeId] = []
    if msg.hop is wire.Hop.SOURCE:
        relayed = wire.Data(msg.msg_id, msg.origin, wire.Hop.PEER, msg.payload)
        for peer in sorted(oh_peers):
            if peer == self_id:
                continue
            conn = oh_peers[peer]
            if conn is None or not conn.is_open:
                broken.append(peer)
                continue
            deliveries.append((peer, relayed))
    for eh in sorted(set(local_ehs)):
        if eh != msg.origin:
            deliveries.append((eh, msg))
    return ForwardPlan(tuple(deliveries), tuple(broken))


MsgKey = Tuple[NodeId, int]


class RecentMessages:
    """
    Data messages an OH has already forwarded, with their peer-hop receipt counts.

    Holds at most ``capacity`` keys; the least recently touched one is evicted
    first, so a late duplicate of an evicted message would be forwarded again.
    """

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise McastError(f"capacity must be >= 1, got {capacity}", code="CAPACITY")
        self.capacity = capacity
        # key -> [forwarded, peer-hop receipts]
        self._entries: "OrderedDict[MsgKey, List]" = OrderedDict()

    def __contains__(self, key: MsgKey) -> bool:
        entry = self._entries.get(key)
        return entry is not None and entry[0]

    def __len__(self) -> int:
        return len(self._entries)

    def _entry(self, key: MsgKey) -> List:
        entry = self._entries.get(key)
        if entry is None:
            entry = self._entries[key] = [False, 0]
            if len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
        else:
            self._entries.move_to_end(key)
        return entry

    def record(self, msg: wire.Data) -> bool:
        """Count a peer-hop receipt; True only the first time ``msg`` is seen."""
        entry = self._entry((msg.origin, msg.msg_id))
        if msg.hop is wire.Hop.PEER:
            entry[1] += 1
        if entry[0]:
            return False
        entry[0] = True
        return True

    def peer_receipts(self, key: MsgKey) -> int:
        entry = self._entries.get(key)
        return entry[1] if entry is not None else 0

    def clear(self) -> None:
        self._entries.clear()


@dataclass
class PairRecord:
    """Dedup outcome of one OH pair as seen by one endpoint."""

    owner: NodeId
    peer: NodeId
    out_us: Optional[int]
    in_us: Optional[int]
    kept: Optional[Direction]
    kept_conn_id: Optional[int]
    decided_at: float


@dataclass
class GraphStats:
    per_oh_gtime_ms: Dict[NodeId, float]
    pairs: List[PairRecord] = field(default_factory=list)
    absent_pairs: List[Tuple[NodeId, NodeId]] = field(default_factory=list)
    kept_conn_ids: Set[int] = field(default_factory=set)

    @property
    def construction_time_ms(self) -> float:
        return max(self.per_oh_gtime_ms.values(), default=0.0)

    @property
    def connection_count(self) -> int:
        return len(self.kept_conn_ids)


class _Pair:
    """In-progress resolution of one peer pair on one host."""

    __slots__ = ("peer", "out_conn", "out_done", "out_us", "in_conn", "peer_done",
                 "peer_us", "sent", "decided", "reconnect", "attempt", "retry_timer", "retries")

    def __init__(self, peer: NodeId, reconnect: bool = False):
        self.peer = peer
        self.out_conn: Optional[SimConn] = None
        self.out_done = False
        self.out_us: Optional[int] = None
        self.in_conn: Optional[SimConn] = None
        self.peer_done = False
        self.peer_us: Optional[int] = None
        self.sent = False
        self.decided = False
        self.reconnect = reconnect
        self.attempt = None
        self.retry_timer: Optional[Timer] = None
        self.retries = 0


class SimOverlayHost(SimHost):
    """
    An OH on the simulated network.

    Args:
        net: Simulated network
        node: This OH
        mh: Monitor to report to, or None for graph-only runs
    """

    def __init__(self, net: SimNetwork, node: NodeId, mh: Optional[NodeId] = None):
        super().__init__(net, node)
        self.mh = mh
        self.timing = net.timing
        self.peers: Dict[NodeId, PeerConn] = {}
        self.local_ehs: Dict[NodeId, SimConn] = {}
        self.records: Dict[NodeId, PairRecord] = {}
        self.absent: Set[NodeId] = set()
        self.lost_peers: Set[NodeId] = set()
        self.recent = RecentMessages()
        self.gtime_ms: Optional[float] = None
        self.load_reports_sent = 0
        self._pairs: Dict[NodeId, _Pair] = {}
        self._build_peers: List[NodeId] = []
        self._build_started: Optional[float] = None
        self._on_built: Optional[Callable[["SimOverlayHost"], None]] = None
        self._mh_conn: Optional[SimConn] = None
        self._mh_connecting = False
        self._reporting = False

    @property
    def load(self) -> float:
        return self.net.spec.node(self.node).load.reported_load

    # --- complete-graph construction ----------------------------------------

    def build_complete_graph(self, peers: Iterable[NodeId],
                             on_built: Optional[Callable[["SimOverlayHost"], None]] = None) -> None:
        """Connect to every peer, measure both directions, keep the faster one."""
        self._build_peers = sorted(p for p in peers if p != self.node)
        self._build_started = self.net.now()
        self._on_built = on_built
        self.gtime_ms = None
        for peer in self._build_peers:
            pair = self._pairs.get(peer)
            if pair is None or pair.decided:
                pair = self._pairs[peer] = _Pair(peer)
            if pair.attempt is None and pair.out_conn is None and not pair.out_done:
                self._connect_out(pair)
        deadline = self.timing.os_cap_ms + 2 * self.timing.probe_timeout_ms
        self.later(deadline, self._build_deadline)
        self._check_built()

    def _connect_out(self, pair: _Pair) -> None:
        pair.attempt = self.net.connect(self.node, pair.peer, lambda res, p=pair: self._on_out_result(p, res))

    def _on_out_result(self, pair: _Pair, res: ConnResult) -> None:
        pair.attempt = None
        if self._pairs.get(pair.peer) is not pair or pair.decided:
            if res.ok:
                self.net.close(res.conn, by=self.node)
            return
        if not res.ok:
            if pair.reconnect and pair.in_conn is None:
                self._schedule_retry(pair)
                return
            pair.out_done = True
            self._send_meas(pair)
            return
        pair.out_conn = res.conn
        self.ping(res.conn, lambda rtt, p=pair: self._on_out_rtt(p, rtt), self.timing.probe_timeout_ms)

    def _on_out_rtt(self, pair: _Pair, rtt: Optional[float]) -> None:
        if pair.decided or pair.out_done:
            return
        pair.out_done = True
        pair.out_us = to_us(rtt) if rtt is not None else None
        self._send_meas(pair)

    def _send_meas(self, pair: _Pair) -> None:
        if not pair.out_done or pair.sent:
            self._maybe_decide(pair)
            return
        conn = pair.out_conn if (pair.out_conn and pair.out_conn.is_open) else pair.in_conn
        if conn is not None and conn.is_open:
            self.send_msg(conn, wire.PeerMeas(pair.out_us))
            pair.sent = True
        self._maybe_decide(pair)

    def _maybe_decide(self, pair: _Pair) -> None:
        if pair.decided or not (pair.out_done and pair.sent and pair.peer_done):
            return
        pair.decided = True
        now = self.net.now()
        out_ok = pair.out_us is not None and pair.out_conn is not None and pair.out_conn.is_open
        in_ok = pair.peer_us is not None and pair.in_conn is not None and pair.in_conn.is_open
        if not out_ok and not in_ok:
            self._pair_failed(pair)
            return
        keep = resolve_duplicate(pair.out_us if out_ok else None, pair.peer_us if in_ok else None,
                                 self.node, pair.peer)
        if keep is Direction.OUTGOING:
            kept, latency_us = pair.out_conn, pair.out_us
        else:
            kept, latency_us = pair.in_conn, pair.peer_us
            if pair.out_conn is not None and pair.out_conn.is_open:
                # eliminated direction is ours: we close it
                self.net.close(pair.out_conn, by=self.node)
        self.peers[pair.peer] = PeerConn(pair.peer, keep, kept, latency_us / 1000.0)
        self.records[pair.peer] = PairRecord(self.node, pair.peer, pair.out_us, pair.peer_us,
                                             keep, kept.conn_id, now)
        self.absent.discard(pair.peer)
        self.lost_peers.discard(pair.peer)
        if pair.reconnect:
            logger.debug(f"{self.node}: reconnected to {pair.peer} ({keep.value})")
        self._report_link(pair.peer, latency_us)
        self._check_built()

    def _pair_failed(self, pair: _Pair) -> None:
        for conn in (pair.out_conn, pair.in_conn):
            if conn is not None and conn.is_open:
                self.net.close(conn, by=self.node)
        if pair.reconnect:
            fresh = self._pairs[pair.peer] = _Pair(pair.peer, reconnect=True)
            fresh.retries = pair.retries
            self._schedule_retry(fresh)
            return
        self._mark_absent(pair.peer)

    def _mark_absent(self, peer: NodeId) -> None:
        self.absent.add(peer)
        self.records[peer] = PairRecord(self.node, peer, None, None, None, None, self.net.now())
        self._check_built()

    def _build_deadline(self) -> None:
        for peer in self._build_peers:
            pair = self._pairs.get(peer)
            if pair is not None and not pair.decided and not pair.reconnect:
                logger.warning(f"{self.node}: no usable connection to {peer}, pair left out")
                pair.decided = True
                if pair.attempt is not None:
                    pair.attempt.cancel()
                for conn in (pair.out_conn, pair.in_conn):
                    if conn is not None and conn.is_open:
                        self.net.close(conn, by=self.node)
                self._mark_absent(peer)

    def _check_built(self) -> None:
        if self.gtime_ms is not None or self._build_started is None:
            return
        if all(p in self.peers or p in self.absent for p in self._build_peers):
            self.gtime_ms = self.net.now() - self._build_started
            logger.debug(f"{self.node}: complete graph part done in {self.gtime_ms:.1f} ms "
                         f"({len(self.peers)} peers, {len(self.absent)} absent)")
            if self._on_built is not None:
                self._on_built(self)

    # --- connection events --------------------------------------------------

    def on_accept(self, conn: SimConn) -> None:
        peer = conn.initiator
        if peer.role is Role.EH:
            return
        if peer.role is not Role.OH:
            return
        pair = self._pairs.get(peer)
        if pair is None or pair.decided:
            old = self.peers.pop(peer, None)
            if old is not None and old.conn.is_open:
                self.net.close(old.conn, by=self.node)
            pair = self._pairs[peer] = _Pair(peer, reconnect=True)
            pair.out_done = True
        if pair.in_conn is not None and pair.in_conn.is_open:
            self.net.close(conn, by=self.node)
            return
        pair.in_conn = conn
        if pair.retry_timer is not None and pair.attempt is None and not pair.out_done:
            # the peer reached us first; our retry is no longer needed
            pair.retry_timer.cancel()
            pair.retry_timer = None
            pair.out_done = True
        self._send_meas(pair)

    def on_close(self, conn: SimConn) -> None:
        peer = conn.peer_of(self.node)
        if peer.role is Role.EH:
            if self.local_ehs.get(peer) is conn:
                del self.local_ehs[peer]
                logger.debug(f"{self.node}: streaming {peer} left")
            return
        if peer == self.mh:
            if self._mh_conn is conn:
                self._mh_conn = None
            return
        pair = self._pairs.get(peer)
        if pair is not None and not pair.decided:
            if conn is pair.out_conn and not pair.out_done:
                pair.out_done = True
                pair.out_us = None
            if conn is pair.in_conn:
                pair.in_conn = None
            self._send_meas(pair)
            return
        kept = self.peers.get(peer)
        if kept is not None and kept.conn is conn:
            del self.peers[peer]
            self.reconnect_peer(peer)

    def on_up(self) -> None:
        """Restarted after a crash: state is gone, rebuild and rejoin."""
        self.reset()
        self.peers.clear()
        self.local_ehs.clear()
        self._pairs.clear()
        self.records.clear()
        self.absent.clear()
        self.recent.clear()
        self._mh_conn = None
        self._mh_connecting = False
        self._reporting = False
        logger.info(f"{self.node}: restarted, rebuilding overlay")
        self.build_complete_graph(self.net.spec.oh_ids)
        if self.mh is not None:
            self.start_reporting()

    # --- reconnect ----------------------------------------------------------

    def reconnect_peer(self, peer: NodeId) -> None:
        """Re-establish a lost peer connection with exponential backoff."""
        pair = self._pairs.get(peer)
        if pair is not None and not pair.decided:
            return
        logger.debug(f"{self.node}: connection to {peer} lost, reconnecting")
        pair = self._pairs[peer] = _Pair(peer, reconnect=True)
        self._schedule_retry(pair)

    def _schedule_retry(self, pair: _Pair) -> None:
        if pair.retries >= self.timing.reconnect_max_retries:
            pair.decided = True
            self.lost_peers.add(pair.peer)
            logger.warning(f"{self.node}: giving up on {pair.peer} after {pair.retries} retries")
            self._report_link(pair.peer, None)
            return
        delay = self.timing.backoff_ms(pair.retries)
        pair.retries += 1

        def fire() -> None:
            pair.retry_timer = None
            if (self._pairs.get(pair.peer) is pair and not pair.decided and pair.in_conn is None
                    and pair.attempt is None and pair.out_conn is None):
                self._connect_out(pair)

        pair.retry_timer = self.later(delay, fire)

    # --- data path ----------------------------------------------------------

    def handle(self, conn: SimConn, msg: wire.Message) -> None:
        sender = conn.peer_of(self.node)
        if isinstance(msg, wire.PeerMeas):
            pair = self._pairs.get(sender)
            if pair is None or pair.decided:
                return
            pair.peer_done = True
            pair.peer_us = msg.latency_us
            if pair.in_conn is None and conn is not pair.out_conn and conn.is_open:
                pair.in_conn = conn
            self._send_meas(pair)
        elif isinstance(msg, wire.Hello):
            if msg.node.role is Role.EH:
                self.local_ehs[msg.node] = conn
                logger.debug(f"{self.node}: {msg.node} streaming")
        elif isinstance(msg, wire.Data):
            self._on_data(conn, sender, msg)
        elif isinstance(msg, wire.Bye):
            self.net.close(conn, by=self.node)

    def _on_data(self, conn: SimConn, sender: NodeId, msg: wire.Data) -> None:
        if not self.recent.record(msg):
            return
        peer_conns = {p: pc.conn for p, pc in self.peers.items()}
        for p in self._build_peers:
            if p not in peer_conns and p not in self.absent:
                peer_conns[p] = None
        plan = forward(msg, self.node, peer_conns if msg.hop is wire.Hop.SOURCE else {}, self.local_ehs)
        for target, out in plan.deliveries:
            target_conn = self.peers[target].conn if target.role is Role.OH else self.local_ehs[target]
            self.send_msg(target_conn, out)
        for peer in plan.broken_peers:
            if peer not in self._pairs or self._pairs[peer].decided:
                self.reconnect_peer(peer)

    # --- monitor reporting --------------------------------------------------

    def start_reporting(self) -> None:
        """Connect to the MH and send a load report every load interval."""
        if self.mh is None or self._reporting:
            return
        self._reporting = True
        self._ensure_mh()
        self.later(self.timing.load_interval_ms, self._report_tick)

    def _ensure_mh(self) -> None:
        if self._mh_conn is not None or self._mh_connecting:
            return
        self._mh_connecting = True

        def done(res: ConnResult) -> None:
            self._mh_connecting = False
            if not res.ok:
                logger.warning(f"{self.node}: monitor unreachable ({res.reason}), retry next interval")
                return
            self._mh_conn = res.conn
            self.send_msg(res.conn, wire.Hello(self.node))
            self.send_msg(res.conn, wire.LoadReport.from_load(self.load))
            self.load_reports_sent += 1
            for peer, pc in sorted(self.peers.items()):
                self.send_msg(res.conn, wire.LinkReport(peer, to_us(pc.measured_latency_ms)))

        self.net.connect(self.node, self.mh, done)

    def _report_tick(self) -> None:
        if self._mh_conn is not None and self._mh_conn.is_open:
            self.send_msg(self._mh_conn, wire.LoadReport.from_load(self.load))
            self.load_reports_sent += 1
        else:
            self._ensure_mh()
        self.later(self.timing.load_interval_ms, self._report_tick)

    def _report_link(self, peer: NodeId, latency_us: Optional[int]) -> None:
        if self._mh_conn is not None and self._mh_conn.is_open:
            self.send_msg(self._mh_conn, wire.LinkReport(peer, latency_us))


def build_overlay(spec: ScenarioSpec, net: Optional[SimNetwork] = None,
                  trace: bool = False) -> Tuple[GraphStats, Dict[NodeId, SimOverlayHost]]:
    """
    Build the complete graph of every OH in ``spec`` on a fresh simulated
    network (or ``net``) and collect per-OH construction times.
    """
    net = net or SimNetwork(spec, trace=trace)
    hosts = {oh: SimOverlayHost(net, oh) for oh in spec.oh_ids}
    for host in hosts.values():
        host.build_complete_graph(spec.oh_ids)
    net.run_until_idle()
    return collect_stats(hosts), hosts


def collect_stats(hosts: Mapping[NodeId, SimOverlayHost]) -> GraphStats:
    stats = GraphStats(per_oh_gtime_ms={})
    for oh, host in sorted(hosts.items()):
        if host.gtime_ms is not None:
            stats.per_oh_gtime_ms[oh] = host.gtime_ms
        stats.pairs.extend(host.records[p] for p in sorted(host.records))
        stats.kept_conn_ids.update(pc.conn.conn_id for pc in host.peers.values())
        stats.absent_pairs.extend((oh, p) for p in sorted(host.absent) if oh < p)
    return stats
