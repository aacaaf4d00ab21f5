"""
Loopback smoke run: 1 MH, 3 OH and 5 EH as tasks of one event loop,
talking over real TCP sockets.
"""

import asyncio
import time
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Dict, List, Optional

from ..models.scenario import NodeId, TimingParams
from ..models.strategy import StrategyConfig
from ..utils.logger import get_logger
from .endhost import EndHostClient
from .monitor import MonitorServer
from .overlay import OverlayNode

logger = get_logger("almcast.live.smoke")

SMOKE_TIMING = TimingParams(
    os_cap_ms=3000.0,
    probe_timeout_ms=1000.0,
    load_interval_ms=200.0,
    missed_reports=3,
    reconnect_base_ms=100.0,
    reconnect_cap_ms=800.0,
    reconnect_max_retries=3,
    mh_retry_attempts=5,
)


@dataclass
class SmokeCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SmokeReport:
    checks: List[SmokeCheck] = field(default_factory=list)
    elapsed_s: float = 0.0
    error: Optional[str] = None

    def check(self, name: str, passed: bool, detail: str = "") -> bool:
        self.checks.append(SmokeCheck(name, passed, detail))
        (logger.success if passed else logger.error)(f"smoke: {name}: {'ok' if passed else 'FAILED'} {detail}")
        return passed

    @property
    def passed(self) -> bool:
        return self.error is None and bool(self.checks) and all(c.passed for c in self.checks)


async def _wait_for(predicate: Callable[[], bool], timeout_s: float, poll_s: float = 0.05) -> bool:
    deadline = time.monotonic() + timeout_s
    while not predicate():
        if time.monotonic() >= deadline:
            return False
        await asyncio.sleep(poll_s)
    return True


async def _broadcast(ehs: Dict[NodeId, EndHostClient], sender: NodeId,
                     settle_s: float = 0.3, timeout_s: float = 5.0) -> Dict[NodeId, int]:
    msg_id = await ehs[sender].send_data(b"smoke")
    key = (sender, msg_id)
    expected = [eh for eh, client in sorted(ehs.items()) if eh != sender and client.is_streaming]
    await _wait_for(lambda: all(key in ehs[eh].received for eh in expected), timeout_s)
    await asyncio.sleep(settle_s)
    return {eh: ehs[eh].received.count(key) for eh in expected}


def _kept_pairs(ohs: Dict[NodeId, OverlayNode]) -> Dict[tuple, bool]:
    """Per OH pair: both ends keep the same socket."""
    agreed = {}
    live = sorted(ohs)
    for i, a in enumerate(live):
        for b in live[i + 1:]:
            pa, pb = ohs[a].peers.get(b), ohs[b].peers.get(a)
            agreed[(a, b)] = (
                pa is not None and pb is not None
                and pa.conn.local_addr == pb.conn.remote_addr
                and pa.conn.remote_addr == pb.conn.local_addr
            )
    return agreed


async def run_real_smoke(base_port: int = 47100, host: str = "127.0.0.1",
                         timing: Optional[TimingParams] = None, n_oh: int = 3, n_eh: int = 5,
                         on_stage: Optional[Callable[[str], Awaitable[None]]] = None) -> SmokeReport:
    """
    Run every assertion of the loopback smoke test and report each one.

    Args:
        base_port: MH port; OHs use the following ``n_oh`` ports
        host: Loopback address
        timing: Timers (short defaults so a dead OH is noticed within a second)
        n_oh: Overlay host count
        n_eh: End host count
    """
    timing = timing or SMOKE_TIMING
    started = time.monotonic()
    report = SmokeReport()
    mh_addr = f"{host}:{base_port}"
    oh_addrs = {NodeId.oh(i): f"{host}:{base_port + 1 + i}" for i in range(n_oh)}
    mh = MonitorServer(NodeId.mh(0), mh_addr, timing)
    ohs = {
        oh: OverlayNode(oh, addr, timing, mh_addr=mh_addr, peers=oh_addrs, load=0.1 * oh.id)
        for oh, addr in oh_addrs.items()
    }
    strategy = StrategyConfig.app_timeout(timing.probe_timeout_ms)
    ehs = {NodeId.eh(i): EndHostClient(NodeId.eh(i), mh_addr, timing, strategy) for i in range(n_eh)}

    async def stage(name: str) -> None:
        logger.info(f"smoke: {name}")
        if on_stage is not None:
            await on_stage(name)

    try:
        await stage("starting monitor and overlay hosts")
        await mh.start()
        for node in ohs.values():
            await node.start()
        for node in ohs.values():
            await node.connect_monitor()
        await asyncio.gather(*(node.build() for node in ohs.values()))
        pairs = _kept_pairs(ohs)
        expected_pairs = n_oh * (n_oh - 1) // 2
        report.check("complete graph built",
                     len(pairs) == expected_pairs and all(pairs.values()),
                     f"{sum(pairs.values())}/{expected_pairs} connections kept by both ends")

        await stage("joining end hosts")
        await asyncio.gather(*(client.join() for client in ehs.values()))
        streaming = [eh for eh, c in ehs.items() if c.is_streaming]
        report.check("all EHs streaming", len(streaming) == n_eh, f"{len(streaming)}/{n_eh}")

        await stage("first broadcast")
        sender = min(ehs)
        counts = await _broadcast(ehs, sender)
        report.check("broadcast delivered exactly once",
                     len(counts) == n_eh - 1 and all(n == 1 for n in counts.values()),
                     f"from {sender}: {counts}")

        before = {eh: c.assigned_oh for eh, c in ehs.items()}
        load = {oh: sum(1 for a in before.values() if a == oh) for oh in ohs}
        killed = min(load, key=lambda oh: (-load[oh], oh))
        affected = sorted(eh for eh, oh in before.items() if oh == killed)
        await stage(f"killing {killed} ({len(affected)} EH)")
        await ohs[killed].stop()

        recovered = await _wait_for(
            lambda: all(ehs[eh].is_streaming and ehs[eh].assigned_oh != killed for eh in affected),
            timeout_s=15.0,
        )
        report.check("EHs of killed OH reassigned", recovered,
                     ", ".join(f"{eh}->{ehs[eh].assigned_oh}" for eh in affected))
        untouched = [eh for eh in ehs if eh not in affected and ehs[eh].assigned_oh != before[eh]]
        report.check("other EHs kept their OH", not untouched, f"moved: {untouched}")

        await stage("second broadcast")
        sender = max(ehs)
        counts = await _broadcast(ehs, sender)
        report.check("broadcast after failure delivered exactly once",
                     len(counts) == n_eh - 1 and all(n == 1 for n in counts.values()),
                     f"from {sender}: {counts}")
    except Exception as e:
        logger.exception(f"smoke run aborted: {e}")
        report.error = f"{type(e).__name__}: {e}"
    finally:
        for client in ehs.values():
            await client.stop()
        for node in ohs.values():
            await node.stop()
        await mh.stop()
        report.elapsed_s = time.monotonic() - started
    return report
