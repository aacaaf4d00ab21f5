import time
from pathlib import Path

import pytest

from almcast.core.experiments import (
    ExperimentResult,
    SimDeployment,
    compare_results,
    measure_phase,
    run_failure_drill,
    run_fig2,
    run_fig3_5,
    run_fig6,
    run_fig7,
    run_fig8,
    run_figure,
)
from almcast.errors import McastError
from almcast.models.scenario import NodeId, load_scenario
from almcast.models.strategy import StrategyConfig, parse_strategy

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

HEAVY_TAIL = """\
[oh] preset=table1-20oh
[eh] preset=table2-100eh
[mh] region=romania
[link] preset=zones-tail
[run] seed=7
"""


class TestFigures:
    def test_fig2_uniform(self, uniform_spec):
        result = run_fig2(uniform_spec, oh_counts=(2, 3))
        assert result.columns == ["n_oh", "construction_ms", "connections"]
        assert result.column("connections") == [1, 3]
        assert result.column("construction_ms") == [pytest.approx(35.0)] * 2

    def test_fig3_uniform(self, uniform_spec):
        result = run_fig3_5(uniform_spec, oh_counts=(3,), eh_counts=(2, 4))
        assert result.column("n_eh") == [2, 4]
        assert result.column("avg_mi_ms") == [65.0, 65.0]
        assert result.column("max_mi_ms") == [65.0, 65.0]

    def test_fig6_response_grows_with_burst(self, uniform_spec):
        result = run_fig6(uniform_spec, bursts=(1, 2, 4), n_oh=3)
        responses = result.column("avg_response_ms")
        assert responses == sorted(responses)
        assert responses[0] < responses[-1]
        assert all(d >= 0 for d in result.column("avg_modeled_decision_ms"))

    def test_fig8_zero_tail_measures_everything(self, uniform_spec):
        result = run_fig8(uniform_spec, oh_counts=(2, 3), n_eh=4)
        assert result.column("pct_measured") == [100.0] * 4
        assert result.column("variant") == ["noreconnect", "apptimeout:10000"] * 2

    def test_fig8_timeout_never_measures_more(self, tail_spec):
        result = run_fig8(tail_spec, oh_counts=(3,), n_eh=4)
        plain, cut = result.column("pct_measured")
        assert cut <= plain
        assert cut < 100.0

    def test_unknown_figure(self, uniform_spec):
        with pytest.raises(McastError):
            run_figure("fig9", uniform_spec)

    def test_too_small_scenario(self, uniform_spec):
        with pytest.raises(McastError):
            run_fig2(uniform_spec, oh_counts=(10, 20))


class TestStrategyTrend:
    @pytest.mark.slow
    def test_heavy_tail_ordering(self):
        spec = load_scenario(HEAVY_TAIL)
        result = run_fig7(spec, n_oh=20, n_eh=100)
        baseline, noreconnect, timeout, grouped = result.column("avg_mi_ms")
        assert baseline >= noreconnect >= timeout >= grouped
        assert baseline > timeout > grouped
        assert result.rows[2]["improvement_vs_baseline"] >= 3.0

    @pytest.mark.slow
    def test_heavy_tail_measured_share(self):
        spec = load_scenario(HEAVY_TAIL)
        result = run_fig8(spec, oh_counts=(3, 20), n_eh=100)
        by_key = {(r["n_oh"], r["variant"]): r["pct_measured"] for r in result.rows}
        for n_oh in (3, 20):
            assert by_key[(n_oh, "noreconnect")] >= by_key[(n_oh, "apptimeout:10000")]

    @pytest.mark.slow
    def test_full_size_strategy_ordering(self):
        spec = load_scenario((SCENARIOS / "heavy-tail.scn").read_text(encoding="utf-8"))
        started = time.perf_counter()
        result = run_fig7(spec, n_oh=40, n_eh=1000)
        elapsed = time.perf_counter() - started
        assert result.column("strategy") == ["baseline:5", "noreconnect", "apptimeout:10000",
                                             "partition:5+apptimeout:10000"]
        baseline, noreconnect, timeout, grouped = result.column("avg_mi_ms")
        assert baseline > noreconnect > timeout > grouped
        assert baseline >= 5 * grouped
        assert elapsed < 60.0

    @pytest.mark.slow
    def test_full_size_fewer_ohs_measure_more(self):
        spec = load_scenario((SCENARIOS / "heavy-tail.scn").read_text(encoding="utf-8"))
        result = run_fig8(spec, oh_counts=(3, 40), n_eh=1000)
        by_key = {(r["n_oh"], r["variant"]): r["pct_measured"] for r in result.rows}
        for variant in ("noreconnect", "apptimeout:10000"):
            assert by_key[(3, variant)] > by_key[(40, variant)]

    def test_partition_probes_fewer_ohs(self, wide_spec):
        reports = measure_phase(wide_spec, parse_strategy("partition:2+noreconnect"))
        assert all(len(r.samples) == 2 for r in reports.values())


class TestDeterminism:
    def test_same_seed_same_csv(self, tail_spec):
        first = run_fig3_5(tail_spec, oh_counts=(3,), eh_counts=(4,))
        second = run_fig3_5(tail_spec, oh_counts=(3,), eh_counts=(4,))
        assert first.to_csv() == second.to_csv()

    def test_same_seed_same_trace(self, tail_spec):
        traces = []
        for _ in range(2):
            deployment = SimDeployment(tail_spec, trace=True)
            deployment.build()
            traces.append(deployment.net.trace_csv())
        assert traces[0] == traces[1]

    def test_seed_changes_result(self, tail_spec):
        a = run_fig3_5(tail_spec, oh_counts=(3,), eh_counts=(4,), seed=1)
        b = run_fig3_5(tail_spec, oh_counts=(3,), eh_counts=(4,), seed=2)
        assert a.scenario_hash != b.scenario_hash
        assert a.seed == 1

    def test_csv_columns(self, uniform_spec, tmp_path):
        result = run_fig2(uniform_spec, oh_counts=(3,))
        path = result.write(tmp_path)
        header, row = path.read_text().splitlines()
        assert header == "n_oh,construction_ms,connections,scenario_hash,seed"
        assert row.startswith("3,35.000,3,")

    def test_compare_needs_same_scenario(self, uniform_spec):
        a = ExperimentResult(name="x", seed=1, scenario_hash="aa", columns=["v"], rows=[{"v": 1}])
        b = ExperimentResult(name="x", seed=2, scenario_hash="aa", columns=["v"], rows=[{"v": 2}])
        assert list(compare_results(a, b).columns) == ["v_1", "v_2"]
        with pytest.raises(McastError):
            compare_results(a, b.model_copy(update={"scenario_hash": "bb"}))


class TestFailureDrill:
    def test_kill_busiest_oh(self, wide_spec):
        strategy = StrategyConfig.partitioned(2, StrategyConfig.app_timeout(10000))
        report = run_failure_drill(wide_spec, strategy=strategy)
        group0 = [NodeId.eh(0), NodeId.eh(2), NodeId.eh(4)]
        assert report.killed == NodeId.oh(0)
        assert report.affected == group0
        assert report.reassigned == group0
        assert all(report.after[eh] == NodeId.oh(2) for eh in group0)
        assert report.untouched_changed == []
        assert report.dangling == []
        assert report.broadcast.exactly_once
        assert report.passed

    def test_scenario_file_drill(self):
        spec = load_scenario((SCENARIOS / "failure-drill.scn").read_text(encoding="utf-8"))
        report = run_failure_drill(spec, strategy=spec.strategy)
        assert report.passed
        assert report.affected

    def test_deployment_streams_everyone(self, uniform_spec):
        deployment = SimDeployment(uniform_spec)
        assert deployment.build()
        assert deployment.join(StrategyConfig.app_timeout(10000))
        placement = deployment.placement()
        assert all(oh is not None for oh in placement.values())
        assert deployment.busiest_oh() == NodeId.oh(0)
