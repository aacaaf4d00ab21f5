"""
Figure runners and drills on the simulated network.

Every runner is a pure function of (scenario, seed): it builds fresh
simulated networks, never reads the wall clock and returns an
:class:`ExperimentResult` whose CSV is byte-identical across runs.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from ..errors import McastError
from ..models.measurement import MeasurementReport
from ..models.presets import TABLE1_SIZES, table3_group_count
from ..models.scenario import FailureEvent, FailureKind, NodeId, ScenarioSpec, scenario_hash
from ..models.strategy import StrategyConfig, parse_strategy
from ..utils.logger import get_logger
from .endhost import SimEndHost, probe_targets, tested_percentage
from .monitor import DistributionState, InterOhLatencyMatrix, MonitorService, SimMonitorHost
from .overlay import SimOverlayHost, build_overlay
from .simnet import SimNetwork

logger = get_logger("almcast.experiments")

FLOAT_FORMAT = "%.3f"

FIG3_EH_COUNTS = (10, 50, 100, 500, 1000)
FIG6_BURSTS = (1, 10, 50, 100, 200)
FIG8_VARIANTS = ("noreconnect", "apptimeout:10000")


class ExperimentResult(BaseModel):
    """Rows of one figure run, bound to the scenario that produced them."""

    name: str
    seed: int
    scenario_hash: str
    columns: List[str]
    rows: List[Dict[str, Any]] = Field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=self.columns)
        frame["scenario_hash"] = self.scenario_hash
        frame["seed"] = self.seed
        return frame

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{self.name}.csv"
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    def column(self, name: str) -> List[Any]:
        return [row[name] for row in self.rows]


def compare_results(a: ExperimentResult, b: ExperimentResult) -> pd.DataFrame:
    """
    Side-by-side rows of two runs of the same figure.

    Raises:
        McastError: The runs come from different scenarios
    """
    if a.scenario_hash != b.scenario_hash:
        raise McastError(
            f"scenario hash mismatch: {a.scenario_hash} vs {b.scenario_hash}", code="HASH_MISMATCH"
        )
    left = pd.DataFrame(a.rows, columns=a.columns)
    right = pd.DataFrame(b.rows, columns=b.columns)
    return left.join(right, lsuffix=f"_{a.seed}", rsuffix=f"_{b.seed}")


def _result(name: str, spec: ScenarioSpec, columns: Sequence[str]) -> ExperimentResult:
    return ExperimentResult(name=name, seed=spec.seed, scenario_hash=scenario_hash(spec), columns=list(columns))


def _seeded(spec: ScenarioSpec, seed: Optional[int]) -> ScenarioSpec:
    return spec if seed is None or seed == spec.seed else spec.with_overrides(seed=seed)


def _available(counts: Iterable[int], limit: int) -> List[int]:
    kept = [n for n in counts if n <= limit]
    if not kept:
        raise McastError(f"scenario too small for {list(counts)} (has {limit})", code="SCENARIO_SIZE")
    return kept


# --- measurement phase ------------------------------------------------------------


def measure_phase(spec: ScenarioSpec, strategy: StrategyConfig,
                  net: Optional[SimNetwork] = None) -> Dict[NodeId, MeasurementReport]:
    """
    Every EH of ``spec`` probes its OHs concurrently from t=0; OHs only answer pings.

    Returns:
        Report per EH
    """
    net = net or SimNetwork(spec)
    for oh in spec.oh_ids:
        SimOverlayHost(net, oh)
    reports: Dict[NodeId, MeasurementReport] = {}
    targets = probe_targets(spec.eh_ids, spec.oh_ids, strategy)
    for eh in spec.eh_ids:
        host = SimEndHost(net, eh)
        host.measure_all(targets[eh], strategy, lambda r, eh=eh: reports.__setitem__(eh, r))
    net.run_until_idle()
    missing = [eh for eh in spec.eh_ids if eh not in reports]
    if missing:
        raise McastError(f"measurement phase left {len(missing)} EH(s) without a report", code="INCOMPLETE")
    return reports


def _mi_stats(reports: Dict[NodeId, MeasurementReport]) -> Tuple[float, float]:
    values = np.array([r.m_i_ms for r in reports.values()], dtype=float)
    return float(values.mean()), float(values.max())


# --- figure runners ---------------------------------------------------------------


def run_fig2(spec: ScenarioSpec, oh_counts: Sequence[int] = TABLE1_SIZES,
             seed: Optional[int] = None) -> ExperimentResult:
    """Complete-graph construction time per OH-set size."""
    spec = _seeded(spec, seed)
    result = _result("fig2", spec, ["n_oh", "construction_ms", "connections"])
    for n_oh in _available(oh_counts, len(spec.oh_nodes)):
        stats, _ = build_overlay(spec.restrict(n_oh, 0))
        result.rows.append({
            "n_oh": n_oh,
            "construction_ms": stats.construction_time_ms,
            "connections": stats.connection_count,
        })
        logger.log("PROGRESS", f"fig2 n_oh={n_oh}: {stats.construction_time_ms:.1f} ms")
    return result


def run_fig3_5(spec: ScenarioSpec, oh_counts: Sequence[int] = TABLE1_SIZES,
               eh_counts: Sequence[int] = FIG3_EH_COUNTS, strategy: Optional[StrategyConfig] = None,
               seed: Optional[int] = None) -> ExperimentResult:
    """Average and maximum M_i per (OH count, EH count)."""
    spec = _seeded(spec, seed)
    strategy = strategy or spec.strategy
    result = _result("fig3_5", spec, ["n_oh", "n_eh", "avg_mi_ms", "max_mi_ms"])
    for n_oh in _available(oh_counts, len(spec.oh_nodes)):
        for n_eh in _available(eh_counts, len(spec.eh_nodes)):
            reports = measure_phase(spec.restrict(n_oh, n_eh), strategy)
            avg, peak = _mi_stats(reports)
            result.rows.append({"n_oh": n_oh, "n_eh": n_eh, "avg_mi_ms": avg, "max_mi_ms": peak})
            logger.log("PROGRESS", f"fig3/5 {n_oh} OH x {n_eh} EH: avg {avg:.0f} ms, max {peak:.0f} ms")
    return result


def default_fig7_strategies(n_oh: int) -> List[StrategyConfig]:
    timeout = StrategyConfig.app_timeout(10000.0)
    return [
        StrategyConfig.baseline(),
        StrategyConfig.no_reconnect(),
        timeout,
        StrategyConfig.partitioned(table3_group_count(n_oh), timeout),
    ]


def run_fig7(spec: ScenarioSpec, strategies: Optional[Sequence[StrategyConfig]] = None,
             n_oh: int = 40, n_eh: int = 1000, seed: Optional[int] = None) -> ExperimentResult:
    """
    Average M_i per connection strategy at one (OH, EH) size; the first
    strategy is the baseline the improvement ratios refer to.
    """
    spec = _seeded(spec, seed)
    n_oh = min(n_oh, len(spec.oh_nodes))
    n_eh = min(n_eh, len(spec.eh_nodes))
    strategies = list(strategies) if strategies else default_fig7_strategies(n_oh)
    sub = spec.restrict(n_oh, n_eh)
    result = _result("fig7", spec, ["strategy", "avg_mi_ms", "improvement_vs_baseline"])
    baseline_avg: Optional[float] = None
    for strategy in strategies:
        avg, _ = _mi_stats(measure_phase(sub, strategy))
        if baseline_avg is None:
            baseline_avg = avg
        result.rows.append({
            "strategy": strategy.label,
            "avg_mi_ms": avg,
            "improvement_vs_baseline": baseline_avg / avg if avg > 0 else float("inf"),
        })
        logger.log("PROGRESS", f"fig7 {strategy.label}: avg {avg:.0f} ms")
    return result


def run_fig8(spec: ScenarioSpec, oh_counts: Sequence[int] = TABLE1_SIZES,
             variants: Sequence[str] = FIG8_VARIANTS, n_eh: int = 1000,
             seed: Optional[int] = None) -> ExperimentResult:
    """Percentage of probes that completed, per OH count and connect variant."""
    spec = _seeded(spec, seed)
    n_eh = min(n_eh, len(spec.eh_nodes))
    parsed = [parse_strategy(v) for v in variants]
    result = _result("fig8", spec, ["n_oh", "variant", "pct_measured"])
    for n_oh in _available(oh_counts, len(spec.oh_nodes)):
        sub = spec.restrict(n_oh, n_eh)
        for strategy in parsed:
            pct = tested_percentage(measure_phase(sub, strategy).values())
            result.rows.append({"n_oh": n_oh, "variant": strategy.label, "pct_measured": pct})
            logger.log("PROGRESS", f"fig8 {n_oh} OH {strategy.label}: {pct:.2f}%")
    return result


def overlay_matrix(hosts: Dict[NodeId, SimOverlayHost]) -> InterOhLatencyMatrix:
    """Inter-OH matrix from the kept connections of a built overlay."""
    matrix = InterOhLatencyMatrix()
    for oh, host in sorted(hosts.items()):
        for peer, pc in sorted(host.peers.items()):
            if oh < peer and pc.measured_latency_ms is not None:
                matrix.set_ms(oh, peer, pc.measured_latency_ms)
    return matrix


def run_fig6(spec: ScenarioSpec, bursts: Sequence[int] = FIG6_BURSTS, n_oh: int = 40,
             seed: Optional[int] = None) -> ExperimentResult:
    """
    MH response time for bursts of simultaneous requests.

    Reports come from one measurement phase; each burst is replayed from a
    fresh monitor state with every request arriving at the same instant.
    """
    spec = _seeded(spec, seed)
    n_oh = min(n_oh, len(spec.oh_nodes))
    bursts = _available(bursts, len(spec.eh_nodes))
    sub = spec.restrict(n_oh, max(bursts))
    _, hosts = build_overlay(sub.restrict(n_oh, 0))
    matrix = overlay_matrix(hosts)
    reports = measure_phase(sub, sub.strategy)
    ordered = [reports[eh] for eh in sub.eh_ids]
    result = _result("fig6", spec, ["burst_size", "avg_response_ms", "avg_modeled_decision_ms"])
    for burst in bursts:
        state = DistributionState(matrix=matrix, w_load=sub.w_load)
        for node in sub.oh_nodes:
            state.register_oh(node.node, load=node.load.reported_load)
        service = MonitorService(state, sub.timing)
        decisions = [service.submit(report, 0.0) for report in ordered[:burst]]
        result.rows.append({
            "burst_size": burst,
            "avg_response_ms": float(np.mean([d.response_ms for d in decisions])),
            "avg_modeled_decision_ms": float(np.mean([d.decision_us for d in decisions])) / 1000.0,
        })
        measured_ms = float(np.mean([d.measured_us for d in decisions])) / 1000.0
        logger.log("PROGRESS", f"fig6 burst {burst}: {result.rows[-1]['avg_response_ms']:.3f} ms "
                               f"(decisions took {measured_ms:.4f} ms of wall time)")
    return result


FIGURES: Dict[str, Callable[..., ExperimentResult]] = {
    "fig2": run_fig2,
    "fig3": run_fig3_5,
    "fig5": run_fig3_5,
    "fig6": run_fig6,
    "fig7": run_fig7,
    "fig8": run_fig8,
}


def run_figure(name: str, spec: ScenarioSpec, seed: Optional[int] = None, **kwargs) -> ExperimentResult:
    """
    Raises:
        McastError: Unknown figure name
    """
    runner = FIGURES.get(name)
    if runner is None:
        raise McastError(f"unknown figure '{name}' (choose from {', '.join(FIGURES)})", code="FIGURE")
    return runner(spec, seed=seed, **kwargs)


# --- full deployment and failure drill --------------------------------------------


class SimDeployment:
    """MH, OHs and EHs of a scenario wired together on one simulated network."""

    def __init__(self, spec: ScenarioSpec, trace: bool = False):
        self.spec = spec
        self.net = SimNetwork(spec, trace=trace)
        self.mh = SimMonitorHost(self.net, spec.mh.node, w_load=spec.w_load)
        self.ohs: Dict[NodeId, SimOverlayHost] = {
            oh: SimOverlayHost(self.net, oh, mh=spec.mh.node) for oh in spec.oh_ids
        }
        self.ehs: Dict[NodeId, SimEndHost] = {
            eh: SimEndHost(self.net, eh, mh=spec.mh.node) for eh in spec.eh_ids
        }

    def run_while(self, pending: Callable[[], bool], horizon_ms: float) -> bool:
        """Advance one load interval at a time while ``pending()``; False if the horizon hit first."""
        deadline = self.net.now() + horizon_ms
        step = self.spec.timing.load_interval_ms
        while pending():
            if self.net.now() >= deadline:
                return False
            self.net.run_until(min(deadline, self.net.now() + step))
        return True

    def build(self, horizon_ms: float = 600_000.0) -> bool:
        self.mh.expect_ohs(self.spec.oh_ids)
        self.mh.start_sweeper()
        for host in self.ohs.values():
            host.build_complete_graph(self.spec.oh_ids)
            host.start_reporting()
        return self.run_while(lambda: any(h.gtime_ms is None for h in self.ohs.values()), horizon_ms)

    def join(self, strategy: Optional[StrategyConfig] = None, horizon_ms: float = 600_000.0) -> bool:
        strategy = strategy or self.spec.strategy
        targets = probe_targets(self.spec.eh_ids, self.spec.oh_ids, strategy)
        for eh, host in self.ehs.items():
            host.join_and_stream(targets[eh], strategy)
        return self.run_while(lambda: not all(h.is_streaming for h in self.ehs.values()), horizon_ms)

    def placement(self) -> Dict[NodeId, Optional[NodeId]]:
        return {eh: host.assigned_oh for eh, host in sorted(self.ehs.items())}

    def busiest_oh(self) -> NodeId:
        counts: Dict[NodeId, int] = {}
        for oh in self.placement().values():
            if oh is not None:
                counts[oh] = counts.get(oh, 0) + 1
        if not counts:
            raise McastError("no EH is streaming", code="NOT_STREAMING")
        return min(counts, key=lambda oh: (-counts[oh], oh))

    def broadcast(self, sender: NodeId, payload: bytes = b"drill",
                  settle_ms: float = 30_000.0) -> "BroadcastCheck":
        """Send one message from ``sender`` and check who received it."""
        host = self.ehs[sender]
        msg_id = host.send_data(payload)
        self.net.run_until(self.net.now() + settle_ms)
        key = (sender, msg_id)
        expected = sorted(eh for eh, h in self.ehs.items() if eh != sender and h.is_streaming)
        receipts = {eh: self.ehs[eh].received.count(key) for eh in expected}
        peer_dupes = sum(max(0, h.recent.peer_receipts(key) - 1) for h in self.ohs.values())
        return BroadcastCheck(sender, msg_id, receipts, peer_dupes,
                              sender_echo=self.ehs[sender].received.count(key))


@dataclass
class BroadcastCheck:
    sender: NodeId
    msg_id: int
    receipts: Dict[NodeId, int]
    duplicate_peer_deliveries: int
    sender_echo: int = 0

    @property
    def exactly_once(self) -> bool:
        return (all(n == 1 for n in self.receipts.values()) and self.duplicate_peer_deliveries == 0
                and self.sender_echo == 0)


@dataclass
class DrillReport:
    """Outcome of one OH-kill drill."""

    killed: NodeId
    affected: List[NodeId]
    reassigned: List[NodeId]
    untouched_changed: List[NodeId]
    dangling: List[NodeId]
    monitor_released: List[NodeId]
    recovery_ms: float
    broadcast: Optional[BroadcastCheck] = None
    before: Dict[NodeId, Optional[NodeId]] = field(default_factory=dict)
    after: Dict[NodeId, Optional[NodeId]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (
            self.reassigned == self.affected
            and not self.untouched_changed
            and not self.dangling
            and (self.broadcast is None or self.broadcast.exactly_once)
        )


def run_failure_drill(spec: ScenarioSpec, strategy: Optional[StrategyConfig] = None,
                      seed: Optional[int] = None, horizon_ms: float = 900_000.0,
                      broadcast: bool = True) -> DrillReport:
    """
    Build the overlay, stream every EH, kill the OH serving the most EHs and
    wait for the monitor to sweep it and its EHs to land elsewhere.

    Raises:
        McastError: The deployment never reached a steady state
    """
    spec = _seeded(spec, seed)
    strategy = strategy or StrategyConfig.app_timeout()
    deployment = SimDeployment(spec)
    if not deployment.build(horizon_ms):
        raise McastError("overlay did not finish building", code="DRILL")
    if not deployment.join(strategy, horizon_ms):
        raise McastError("not every EH reached streaming", code="DRILL")
    logger.success(f"drill: {len(deployment.ehs)} EH streaming over {len(deployment.ohs)} OH")

    before = deployment.placement()
    killed = deployment.busiest_oh()
    affected = sorted(eh for eh, oh in before.items() if oh == killed)
    killed_at = deployment.net.now()
    deployment.net.inject_failure(FailureEvent(at_ms=killed_at, kind=FailureKind.NODE_DOWN, target=killed))
    logger.info(f"drill: killed {killed} serving {len(affected)} EH(s)")

    def pending() -> bool:
        if killed not in deployment.mh.failures:
            return True
        return any(not deployment.ehs[eh].is_streaming for eh in affected)

    if not deployment.run_while(pending, horizon_ms):
        raise McastError(f"EHs of {killed} did not recover", code="DRILL")

    after = deployment.placement()
    changed = sorted(eh for eh in before if after[eh] != before[eh])
    report = DrillReport(
        killed=killed,
        affected=affected,
        reassigned=[eh for eh in changed if eh in affected],
        untouched_changed=[eh for eh in changed if eh not in affected],
        dangling=sorted(
            eh for eh, a in deployment.mh.state.assignments.items() if a.oh == killed
        ) + [eh for eh, oh in after.items() if oh == killed],
        monitor_released=deployment.mh.failures[killed],
        recovery_ms=deployment.net.now() - killed_at,
        before=before,
        after=after,
    )
    if broadcast:
        sender = next(eh for eh in sorted(deployment.ehs) if deployment.ehs[eh].is_streaming)
        report.broadcast = deployment.broadcast(sender)
    return report
