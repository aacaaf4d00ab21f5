"""
Deterministic discrete-event network.

Nodes are callback objects attached to a :class:`SimNetwork`. Time is virtual
milliseconds; the loop never reads the wall clock. Every random decision is
drawn from a per-directed-link stream so results do not depend on the order in
which nodes happen to act.
"""

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

from ..errors import ConnectionClosedError, McastError, UnknownNodeError
from ..models.rng import RngStream, derive_rng
from ..models.scenario import FailureEvent, FailureKind, LinkModel, NodeId, ScenarioSpec
from . import wire

OS_TIMEOUT = "os_timeout"
APP_TIMEOUT = "app_timeout"


class ConnState(str, Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass(eq=False)
class SimConn:
    conn_id: int
    initiator: NodeId
    acceptor: NodeId
    established_at: float
    state: ConnState = ConnState.OPEN
    closed_by: Optional[NodeId] = None
    # per-direction time of the last scheduled delivery, keeps each direction FIFO
    last_delivery: Dict[NodeId, float] = field(default_factory=dict)

    @property
    def is_open(self) -> bool:
        return self.state is ConnState.OPEN

    def peer_of(self, node: NodeId) -> NodeId:
        if node == self.initiator:
            return self.acceptor
        if node == self.acceptor:
            return self.initiator
        raise UnknownNodeError(f"{node} is not an endpoint of conn {self.conn_id}")

    def __repr__(self) -> str:
        return f"SimConn({self.conn_id}, {self.initiator}->{self.acceptor}, {self.state.value})"


@dataclass(frozen=True)
class ConnResult:
    """Outcome of a connect: ``conn`` on success, ``reason`` otherwise."""

    elapsed_ms: float
    conn: Optional[SimConn] = None
    reason: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.conn is not None


class SimNode:
    """Base for node logic. Subclasses override the ``on_*`` hooks."""

    def on_accept(self, conn: SimConn) -> None:
        pass

    def on_message(self, conn: SimConn, data: bytes) -> None:
        pass

    def on_close(self, conn: SimConn) -> None:
        pass

    def on_up(self) -> None:
        pass


class SimHost(SimNode):
    """
    SimNode that speaks the wire protocol.

    Pings are answered automatically; :meth:`ping` measures one probe round trip.
    """

    def __init__(self, net: "SimNetwork", node: NodeId):
        self.net = net
        self.node = node
        self._ping_seq = 0
        self._pending_pings: Dict[int, Tuple[float, "Timer", Callable[[Optional[float]], None]]] = {}
        net.attach(node, self)

    def send_msg(self, conn: SimConn, msg: wire.Message) -> Optional[float]:
        """Send unless the connection is already closed; returns the delivery time."""
        return self.send_frame(conn, wire.encode(msg))

    def send_frame(self, conn: SimConn, frame: bytes) -> Optional[float]:
        if not conn.is_open:
            return None
        return self.net.send(conn, self.node, frame)

    def ping(self, conn: SimConn, on_rtt: Callable[[Optional[float]], None], timeout_ms: float) -> None:
        """Send one 1500-byte probe; ``on_rtt`` gets the round trip in ms, or None on timeout."""
        self._ping_seq = (self._ping_seq + 1) & 0xFFFFFFFF
        seq = self._ping_seq
        timer = self.later(timeout_ms, self._expire_ping, seq)
        self._pending_pings[seq] = (self.net.now(), timer, on_rtt)
        self.send_frame(conn, wire.encode_ping(seq))

    def _expire_ping(self, seq: int) -> None:
        pending = self._pending_pings.pop(seq, None)
        if pending is not None:
            pending[2](None)

    def on_message(self, conn: SimConn, data: bytes) -> None:
        msg = wire.decode_frame(data)
        if isinstance(msg, wire.Ping):
            self.send_frame(conn, wire.encode_pong(msg.seq))
        elif isinstance(msg, wire.Pong):
            pending = self._pending_pings.pop(msg.seq, None)
            if pending is not None:
                sent_at, timer, on_rtt = pending
                timer.cancel()
                on_rtt(self.net.now() - sent_at)
        else:
            self.handle(conn, msg)

    def handle(self, conn: SimConn, msg: wire.Message) -> None:
        pass

    def later(self, delay_ms: float, fn: Callable[..., None], *args: Any) -> "Timer":
        return self.net.call_later(delay_ms, fn, *args, owner=self.node)

    def reset(self) -> None:
        """Forget in-flight probes (node restart)."""
        self._pending_pings.clear()


class Timer:
    """Cancellable scheduled callback, run as ``fn(*args)``."""

    __slots__ = ("at", "fn", "args", "owner", "epoch", "cancelled")

    def __init__(self, at: float, fn: Callable[..., None], owner: Optional[NodeId], epoch: int,
                 args: Tuple[Any, ...] = ()):
        self.at = at
        self.fn = fn
        self.args = args
        self.owner = owner
        self.epoch = epoch
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class ConnectAttempt(Timer):
    """Pending connect; ``cancel()`` drops its result."""

    __slots__ = ("src", "dst", "started_at")


class _Path:
    """Per directed link: the model, the receiver's load and the link's streams."""

    __slots__ = ("link", "load_factor", "connect_rng", "send_rng", "slow")

    def __init__(self, link: LinkModel, load_factor: float):
        self.link = link
        self.load_factor = load_factor
        self.connect_rng: Optional[RngStream] = None
        self.send_rng: Optional[RngStream] = None
        self.slow: Optional[bool] = None


class SimNetwork:
    """
    Event loop plus the network model of one scenario.

    Args:
        spec: Resolved scenario (nodes, link models, timing, seed)
        trace: Record one CSV line per dispatched network event
    """

    def __init__(self, spec: ScenarioSpec, trace: bool = False):
        self.spec = spec
        self.timing = spec.timing
        self._now = 0.0
        self._seq = 0
        self._queue: List[Tuple[float, int, Timer]] = []
        self._handlers: Dict[NodeId, SimNode] = {}
        self._down: Set[NodeId] = set()
        self._epoch: Dict[NodeId, int] = {}
        self._links_down: Set[Tuple[NodeId, NodeId]] = set()
        self._conns: Dict[NodeId, Dict[int, SimConn]] = {}
        self._next_conn_id = 1
        self._streams: Dict[Tuple[NodeId, str], RngStream] = {}
        self._paths: Dict[Tuple[NodeId, NodeId], _Path] = {}
        self._stopped = False
        self.trace: Optional[List[str]] = [] if trace else None
        self.events_dispatched = 0

    # --- clock and queue ---------------------------------------------------

    def now(self) -> float:
        return self._now

    def _push(self, timer: Timer) -> Timer:
        self._seq += 1
        heapq.heappush(self._queue, (timer.at, self._seq, timer))
        return timer

    def call_later(self, delay_ms: float, fn: Callable[..., None], *args: Any,
                   owner: Optional[NodeId] = None) -> Timer:
        """
        Schedule ``fn(*args)`` after ``delay_ms``. A timer owned by a node is skipped
        if that node went down (or restarted) in the meantime.
        """
        if delay_ms < 0:
            raise ValueError("delay must be >= 0")
        epoch = self._epoch.get(owner, 0) if owner is not None else 0
        return self._push(Timer(self._now + delay_ms, fn, owner, epoch, args))

    def _live(self, timer: Timer) -> bool:
        if timer.cancelled:
            return False
        owner = timer.owner
        return owner is None or (owner not in self._down and self._epoch.get(owner, 0) == timer.epoch)

    def stop(self) -> None:
        """End the current ``run_*`` call after the event being dispatched."""
        self._stopped = True

    def run_until_idle(self, max_events: Optional[int] = None) -> float:
        """Dispatch events until the queue drains; returns the time of the last one."""
        self._stopped = False
        dispatched = 0
        while self._queue and not self._stopped:
            at, _, timer = heapq.heappop(self._queue)
            if not self._live(timer):
                continue
            self._now = at
            timer.fn(*timer.args)
            self.events_dispatched += 1
            dispatched += 1
            if max_events is not None and dispatched >= max_events:
                break
        return self._now

    def run_until(self, horizon_ms: float) -> float:
        """Dispatch every event at or before ``horizon_ms``; the clock ends at the horizon."""
        self._stopped = False
        while self._queue and self._queue[0][0] <= horizon_ms and not self._stopped:
            at, _, timer = heapq.heappop(self._queue)
            if not self._live(timer):
                continue
            self._now = at
            timer.fn(*timer.args)
            self.events_dispatched += 1
        if not self._stopped:
            self._now = max(self._now, horizon_ms)
        return self._now

    @property
    def pending_events(self) -> int:
        return len(self._queue)

    # --- nodes ------------------------------------------------------------

    def attach(self, node: NodeId, handler: SimNode) -> None:
        self.spec.node(node)
        self._handlers[node] = handler
        self._conns.setdefault(node, {})
        self._epoch.setdefault(node, 0)

    def handler(self, node: NodeId) -> SimNode:
        try:
            return self._handlers[node]
        except KeyError:
            raise UnknownNodeError(f"no handler attached for {node}") from None

    def is_up(self, node: NodeId) -> bool:
        return node not in self._down

    def link_is_up(self, src: NodeId, dst: NodeId) -> bool:
        return (src, dst) not in self._links_down

    def connections(self, node: NodeId) -> List[SimConn]:
        return list(self._conns.get(node, {}).values())

    def _record(self, kind: str, src, dst, detail: str = "") -> None:
        if self.trace is not None:
            self.trace.append(f"{self._now:.6f},{kind},{src},{dst},{detail}")

    def stream(self, node: NodeId, purpose: str) -> RngStream:
        key = (node, purpose)
        rng = self._streams.get(key)
        if rng is None:
            rng = self._streams[key] = derive_rng(self.spec.seed, node, purpose)
        return rng

    # --- connect ----------------------------------------------------------

    def sample_connect_ms(self, src: NodeId, dst: NodeId) -> Optional[float]:
        """
        Draw one attempt's connect time on src->dst, or None if every SYN is lost.

        Each call consumes a fixed number of draws from the link's stream. The first
        call on a link also decides whether the link sits on the slow tail.
        """
        path = self._path(src, dst)
        link = path.link
        if path.connect_rng is None:
            path.connect_rng = self.stream(src, f"connect:{dst}")
        rng = path.connect_rng
        if path.slow is None:
            path.slow = rng.bernoulli(link.slow_connect_probability)
        schedule = self.timing.syn_schedule_ms
        syn_draws = rng.draws(1 + len(schedule))
        tail = rng.exponential(1.0)

        offset: Optional[float] = None
        for i, u in enumerate(syn_draws):
            if u >= link.syn_loss_probability:
                offset = 0.0 if i == 0 else schedule[i - 1]
                break
        if offset is None:
            return None
        handshake = link.connect_fast_ms
        if path.slow:
            handshake += link.slow_connect_ms * (1.0 + tail)
        return offset + handshake * (1.0 + path.load_factor)

    def _path(self, src: NodeId, dst: NodeId) -> _Path:
        path = self._paths.get((src, dst))
        if path is None:
            path = self._paths[(src, dst)] = _Path(self.spec.link(src, dst), self.spec.node(dst).load.load_factor)
        return path

    def connect(
        self,
        src: NodeId,
        dst: NodeId,
        on_result: Callable[[ConnResult], None],
        app_timeout_ms: Optional[float] = None,
    ) -> ConnectAttempt:
        """
        Start a connect from ``src`` to ``dst``; ``on_result`` runs once it settles.

        Raises:
            UnknownNodeError: Either node is not part of the scenario
        """
        self.spec.node(src)
        self.spec.node(dst)
        if src == dst:
            raise McastError(f"{src} cannot connect to itself")
        if app_timeout_ms is not None and app_timeout_ms <= 0:
            raise ValueError("app_timeout_ms must be > 0")
        if not self.is_up(src):
            raise McastError(f"{src} is down")

        cap = self.timing.os_cap_ms
        sampled = self.sample_connect_ms(src, dst)
        reachable = self.is_up(dst) and self.link_is_up(src, dst)
        elapsed = sampled if (sampled is not None and reachable) else None

        if elapsed is not None and elapsed <= cap and (app_timeout_ms is None or elapsed <= app_timeout_ms):
            outcome, at = None, elapsed
        elif app_timeout_ms is not None and app_timeout_ms < cap:
            outcome, at = APP_TIMEOUT, app_timeout_ms
        else:
            outcome, at = OS_TIMEOUT, cap
        attempt = ConnectAttempt(self._now + at, self._settle, src, self._epoch.get(src, 0))
        attempt.args = (attempt, outcome, on_result, app_timeout_ms)
        attempt.src, attempt.dst, attempt.started_at = src, dst, self._now
        if self.trace is not None:
            self._record("connect_attempt", src, dst, "" if app_timeout_ms is None else f"app_timeout={app_timeout_ms:g}")
        return self._push(attempt)

    def _settle(self, attempt: ConnectAttempt, outcome: Optional[str],
                on_result: Callable[[ConnResult], None], app_timeout_ms: Optional[float]) -> None:
        src, dst = attempt.src, attempt.dst
        elapsed_now = self._now - attempt.started_at
        if outcome is None:
            if dst not in self._down and (src, dst) not in self._links_down:
                conn = self._open_conn(src, dst, attempt.started_at)
                if self.trace is not None:
                    self._record("connect_done", src, dst, f"ok conn={conn.conn_id}")
                self.handler(dst).on_accept(conn)
                on_result(ConnResult(elapsed_now, conn=conn))
                return
            # peer vanished during the handshake
            self._fail_later(attempt, on_result, app_timeout_ms)
            return
        self._record("connect_done", src, dst, outcome)
        on_result(ConnResult(elapsed_now, reason=outcome))

    def _fail_later(self, attempt: ConnectAttempt, on_result: Callable[[ConnResult], None],
                    app_timeout_ms: Optional[float]) -> None:
        cap = self.timing.os_cap_ms
        reason, limit = (APP_TIMEOUT, app_timeout_ms) if (app_timeout_ms is not None and app_timeout_ms < cap) \
            else (OS_TIMEOUT, cap)
        attempt.fn = self._fail
        attempt.args = (attempt, reason, on_result)
        attempt.at = max(attempt.started_at + limit, self._now)
        self._push(attempt)

    def _fail(self, attempt: ConnectAttempt, reason: str, on_result: Callable[[ConnResult], None]) -> None:
        self._record("connect_done", attempt.src, attempt.dst, reason)
        on_result(ConnResult(self._now - attempt.started_at, reason=reason))

    def _open_conn(self, src: NodeId, dst: NodeId, started_at: float) -> SimConn:
        conn = SimConn(self._next_conn_id, src, dst, established_at=self._now)
        self._next_conn_id += 1
        self._conns[src][conn.conn_id] = conn
        self._conns[dst][conn.conn_id] = conn
        return conn

    # --- data -------------------------------------------------------------

    def send(self, conn: SimConn, src: NodeId, data: bytes) -> Optional[float]:
        """
        Send ``data`` from ``src`` over ``conn``.

        Returns:
            Virtual delivery time, or None if the packet is dropped

        Raises:
            ConnectionClosedError: The connection is closed
        """
        if not conn.is_open:
            raise ConnectionClosedError(f"conn {conn.conn_id} is closed")
        dst = conn.peer_of(src)
        path = self._path(src, dst)
        if path.send_rng is None:
            path.send_rng = self.stream(src, f"send:{dst}")
        rng = path.send_rng
        link = path.link
        jitter = (2.0 * rng.random() - 1.0) * link.jitter_ms
        dropped = rng.bernoulli(link.drop_probability)
        if dropped or (src, dst) in self._links_down:
            if self.trace is not None:
                self._record("drop", src, dst, f"bytes={len(data)}")
            return None

        latency = max(0.0, link.base_latency_ms + jitter) * (1.0 + path.load_factor)
        at = max(self._now + latency, conn.last_delivery.get(src, 0.0))
        conn.last_delivery[src] = at
        self._push(Timer(at, self._deliver, None, 0, (conn, src, dst, data)))
        return at

    def _deliver(self, conn: SimConn, src: NodeId, dst: NodeId, data: bytes) -> None:
        # data sent before a graceful close still arrives, like a FIN queued behind it
        if (conn.is_open or conn.closed_by == src) and dst not in self._down:
            if self.trace is not None:
                self._record("deliver", src, dst, f"conn={conn.conn_id} bytes={len(data)}")
            self.handler(dst).on_message(conn, data)

    def close(self, conn: SimConn, by: Optional[NodeId] = None, graceful: bool = True) -> None:
        """
        Close ``conn``. The other endpoint (both if ``by`` is None) gets ``on_close``.

        A graceful close by a node still delivers what that node already sent;
        the peer learns of the close after the last of it.
        """
        if not conn.is_open:
            return
        conn.state = ConnState.CLOSED
        conn.closed_by = by if graceful else None
        notify_at = max(self._now, conn.last_delivery.get(by, 0.0)) if conn.closed_by else self._now
        for node in (conn.initiator, conn.acceptor):
            self._conns.get(node, {}).pop(conn.conn_id, None)
        self._record("close", conn.initiator, conn.acceptor, f"conn={conn.conn_id}")
        for node in (conn.initiator, conn.acceptor):
            if node == by or not self.is_up(node):
                continue
            handler = self.handler(node)
            self.call_later(notify_at - self._now, handler.on_close, conn, owner=node)

    # --- failures ---------------------------------------------------------

    def inject_failure(self, event: FailureEvent) -> None:
        """
        Apply a failure now.

        Raises:
            UnknownNodeError: Target not in the scenario
        """
        self.spec.node(event.target)
        if event.peer is not None:
            self.spec.node(event.peer)
        self._record("failure", event.target, event.peer or "", event.kind.value)

        if event.kind is FailureKind.NODE_DOWN:
            if event.target in self._down:
                return
            self._down.add(event.target)
            self._epoch[event.target] = self._epoch.get(event.target, 0) + 1
            for conn in self.connections(event.target):
                self.close(conn, by=event.target, graceful=False)
        elif event.kind is FailureKind.NODE_UP:
            if event.target not in self._down:
                return
            self._down.discard(event.target)
            self._epoch[event.target] = self._epoch.get(event.target, 0) + 1
            handler = self._handlers.get(event.target)
            if handler is not None:
                self.call_later(0.0, handler.on_up, owner=event.target)
        elif event.kind is FailureKind.LINK_DOWN:
            self._links_down.add((event.target, event.peer))
            for conn in self.connections(event.target):
                if conn.peer_of(event.target) == event.peer:
                    self.close(conn, graceful=False)
        else:
            self._links_down.discard((event.target, event.peer))

    def schedule_failures(self, events=None) -> None:
        """Queue the scenario's failure schedule (or ``events``) at their times."""
        for event in (self.spec.failure_schedule if events is None else events):
            self._push(Timer(event.at_ms, self.inject_failure, None, 0, (event,)))

    def trace_csv(self) -> str:
        return "".join(line + "\n" for line in (self.trace or []))
