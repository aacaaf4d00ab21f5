import itertools
import random
import statistics
import time

import pandas as pd
import pytest

from almcast.core.endhost import build_report
from almcast.core.monitor import (
    DistributionState,
    InterOhLatencyMatrix,
    MonitorService,
    assignment_total_cost,
    distribute,
    global_optimal_assignment,
    greedy_assignment,
    handle_oh_failure,
    latency_cost,
    latency_cost_us,
    sweep_stale,
    update_load,
)
from almcast.errors import (
    DistributionRejected,
    InstanceTooLargeError,
    McastError,
    MissingLatencyError,
    UnknownNodeError,
)
from almcast.models.scenario import NodeId, TimingParams

from tests.conftest import report_for

A, B, C, D = (NodeId.oh(i) for i in range(4))


def _full_matrix(ohs, rng, low=1, high=20):
    return InterOhLatencyMatrix({(a, b): float(rng.randint(low, high)) for a, b in itertools.combinations(ohs, 2)})


def _state(matrix, loads, w_load=0.0):
    state = DistributionState(matrix=matrix, w_load=w_load)
    for oh, load in loads.items():
        state.register_oh(oh, load=load)
    return state


class TestLatencyCost:
    def test_pairwise_sum_plus_edge(self):
        matrix = InterOhLatencyMatrix({(A, B): 10.0, (A, C): 20.0, (B, C): 30.0})
        assert latency_cost({A, B}, C, 5.0, matrix, load=0.0) == 65.0

    def test_load_penalty(self):
        matrix = InterOhLatencyMatrix({(A, B): 10.0})
        assert latency_cost({A}, B, 5.0, matrix, load=0.5, w_load=50.0) == 40.0

    def test_first_pick_is_edge_only(self):
        assert latency_cost(set(), A, 7.5, InterOhLatencyMatrix(), load=0.0) == 7.5

    def test_missing_pair(self):
        with pytest.raises(MissingLatencyError):
            latency_cost({A}, B, 5.0, InterOhLatencyMatrix(), load=0.0)


class TestDistribute:
    def test_first_request_takes_nearest(self):
        matrix = InterOhLatencyMatrix({(A, B): 40.0})
        state = _state(matrix, {A: 0.0, B: 0.0})
        assignment = distribute(report_for(0, {0: 80.0, 1: 50.0}), state)
        assert assignment.oh == B
        assert assignment.cost_ms == 50.0
        assert state.chosen == {B}

    def test_chosen_oh_is_preferred(self):
        matrix = InterOhLatencyMatrix({(A, B): 40.0})
        state = _state(matrix, {A: 0.0, B: 0.0})
        distribute(report_for(0, {0: 80.0, 1: 50.0}), state)
        # A is 30 ms closer but adding it costs the 40 ms overlay edge
        assert distribute(report_for(1, {0: 30.0, 1: 60.0}), state).oh == B

    def test_tie_goes_to_lowest_id(self):
        state = _state(InterOhLatencyMatrix({(A, B): 5.0}), {A: 0.0, B: 0.0})
        assert distribute(report_for(0, {0: 20.0, 1: 20.0}), state).oh == A

    def test_failed_samples_are_not_candidates(self):
        state = _state(InterOhLatencyMatrix({(A, B): 5.0}), {A: 0.0, B: 0.0})
        assert distribute(report_for(0, {0: None, 1: 90.0}), state).oh == B

    def test_no_usable_candidate(self):
        state = _state(InterOhLatencyMatrix(), {A: 0.0})
        with pytest.raises(DistributionRejected):
            distribute(report_for(0, {0: None}), state)

    def test_unregistered_oh_ignored(self):
        state = _state(InterOhLatencyMatrix(), {A: 0.0})
        with pytest.raises(DistributionRejected):
            distribute(report_for(0, {1: 10.0}), state)

    def test_missing_latency_skips_candidate(self):
        state = _state(InterOhLatencyMatrix({(A, C): 10.0}), {A: 0.0, B: 0.0, C: 0.0})
        distribute(report_for(0, {0: 10.0}), state)
        assert distribute(report_for(1, {1: 1.0, 2: 50.0}), state).oh == C

    def test_reassignment_moves_count(self):
        state = _state(InterOhLatencyMatrix({(A, B): 5.0}), {A: 0.0, B: 0.0})
        distribute(report_for(0, {0: 10.0, 1: 90.0}), state)
        distribute(report_for(0, {0: None, 1: 90.0}), state)
        assert state.oh_table[A].assigned_count == 0
        assert state.oh_table[B].assigned_count == 1

    def test_negative_weight(self):
        with pytest.raises(McastError):
            DistributionState(w_load=-1.0)

    def test_matches_exhaustive_argmin(self):
        rng = random.Random(7)
        for instance in range(200):
            n_oh = rng.randint(1, 10)
            ohs = [NodeId.oh(i) for i in range(n_oh)]
            w_load = rng.choice([0.0, 50.0])
            loads = {oh: rng.choice([0.0, 0.1, 0.5, 1.0]) for oh in ohs}
            matrix = _full_matrix(ohs, rng)
            state = _state(matrix, loads, w_load)
            for eh in range(rng.randint(1, 50)):
                edges = {oh.id: (float(rng.randint(1, 20)) if rng.random() < 0.85 else None) for oh in ohs}
                if all(v is None for v in edges.values()):
                    edges[0] = 10.0
                report = report_for(eh, edges)
                costs = {
                    s.oh: latency_cost_us(state.chosen, s.oh, round(edges[s.oh.id] * 1000), matrix,
                                          loads[s.oh], w_load)
                    for s in report.ok_samples()
                }
                expected = min(costs, key=lambda oh: (costs[oh], oh))
                got = distribute(report, state)
                assert got.oh == expected, f"instance {instance}, eh {eh}"
                assert round(got.cost_ms * 1000) == costs[expected]
                assert state.chosen_sum_us == sum(
                    matrix.get_us(a, b) for a, b in itertools.combinations(sorted(state.chosen), 2)
                )

    def test_decision_under_one_millisecond(self):
        rng = random.Random(3)
        ohs = [NodeId.oh(i) for i in range(40)]
        state = _state(_full_matrix(ohs, rng, 50, 900), {oh: 0.1 for oh in ohs}, 50.0)
        reports = [report_for(eh, {oh.id: float(rng.randint(20, 900)) for oh in ohs}) for eh in range(1000)]
        elapsed = []
        for report in reports:
            started = time.perf_counter()
            distribute(report, state)
            elapsed.append(time.perf_counter() - started)
        assert statistics.median(elapsed) < 1e-3


def _random_instance(rng, max_oh=8, max_eh=30):
    ohs = [NodeId.oh(i) for i in range(rng.randint(1, max_oh))]
    loads = {oh: rng.choice([0.0, 0.1, 0.5, 1.0]) for oh in ohs}
    pairs = {(a, b): rng.randint(1, 20) for a, b in itertools.combinations(ohs, 2)}
    requests = []
    for eh in range(rng.randint(1, max_eh)):
        edges = {oh.id: (rng.randint(1, 20) if rng.random() < 0.85 else None) for oh in ohs}
        if all(v is None for v in edges.values()):
            edges[0] = 10
        requests.append((eh, edges))
    return ohs, loads, pairs, requests


def _run(loads, pairs, requests, w_load, scale=1, shuffle=None):
    matrix = InterOhLatencyMatrix({p: float(ms * scale) for p, ms in pairs.items()})
    state = _state(matrix, loads, w_load * scale)
    picks = []
    for eh, edges in requests:
        report = report_for(eh, {k: (v * scale if v is not None else None) for k, v in edges.items()})
        if shuffle is not None:
            samples = list(report.samples)
            shuffle.shuffle(samples)
            report = build_report(report.eh, samples)
        picks.append(distribute(report, state))
    return picks


class TestDistributionProperties:
    def test_sample_order_does_not_matter(self):
        rng = random.Random(11)
        for _ in range(100):
            _, loads, pairs, requests = _random_instance(rng)
            w_load = rng.choice([0.0, 50.0])
            plain = _run(loads, pairs, requests, w_load)
            shuffled = _run(loads, pairs, requests, w_load, shuffle=random.Random(rng.random()))
            assert [a.oh for a in plain] == [a.oh for a in shuffled]
            assert [a.cost_ms for a in plain] == [a.cost_ms for a in shuffled]

    def test_scaling_latencies_keeps_assignment(self):
        rng = random.Random(12)
        for _ in range(100):
            _, loads, pairs, requests = _random_instance(rng)
            w_load = rng.choice([0.0, 50.0])
            scale = rng.choice([2, 3, 7])
            plain = _run(loads, pairs, requests, w_load)
            scaled = _run(loads, pairs, requests, w_load, scale=scale)
            assert [a.oh for a in plain] == [a.oh for a in scaled]
            assert [round(a.cost_ms * 1000) * scale for a in plain] == [round(a.cost_ms * 1000) for a in scaled]

    def test_op_count_is_candidates_times_chosen(self):
        rng = random.Random(13)
        for _ in range(100):
            ohs, loads, pairs, requests = _random_instance(rng, max_oh=10)
            state = _state(InterOhLatencyMatrix({p: float(ms) for p, ms in pairs.items()}), loads)
            for eh, edges in requests:
                report = report_for(eh, edges)
                candidates = [s.oh for s in report.ok_samples()]
                chosen = set(state.chosen)
                expected = sum(1 if oh in chosen else 1 + len(chosen) for oh in candidates)
                before = state.op_count
                distribute(report, state)
                ops = state.op_count - before
                assert ops == expected
                assert ops <= len(candidates) * (len(chosen) + 1)


class TestChosenSum:
    def test_removed_pair_left_out_and_recorded(self):
        matrix = InterOhLatencyMatrix({(A, B): 10.0, (A, C): 20.0, (B, C): 30.0})
        state = _state(matrix, {A: 0.0, B: 0.0, C: 0.0})
        state._add_chosen(A)
        state._add_chosen(B)
        state._add_chosen(C)
        assert state.chosen_sum_us == 60_000
        matrix.remove(A, B)
        state.refresh_matrix()
        assert state.chosen_sum_us == 50_000
        assert state.unknown_chosen_pairs == [(A, B)]
        matrix.set_ms(A, B, 12.0)
        state.refresh_matrix()
        assert state.chosen_sum_us == 62_000
        assert state.unknown_chosen_pairs == []


class TestGlobalOptimum:
    def test_two_by_two(self):
        matrix = InterOhLatencyMatrix({(A, B): 100.0})
        reports = [report_for(0, {0: 10.0, 1: 50.0}), report_for(1, {0: 50.0, 1: 10.0})]
        best = global_optimal_assignment(reports, matrix, {A: 0.0, B: 0.0})
        assert best.evaluated == 4
        # splitting saves 80 ms of edges but costs the 100 ms overlay edge
        assert best.assignment == {NodeId.eh(0): A, NodeId.eh(1): A}
        assert best.total_us == 60_000

    def test_too_large(self):
        reports = [report_for(0, {i: 10.0 for i in range(5)})]
        with pytest.raises(InstanceTooLargeError):
            global_optimal_assignment(reports, InterOhLatencyMatrix(), {})

    def test_greedy_never_beats_global(self):
        rng = random.Random(12)
        gaps = []
        for _ in range(100):
            ohs = [NodeId.oh(i) for i in range(rng.randint(1, 4))]
            w_load = rng.choice([0.0, 50.0])
            loads = {oh: rng.random() for oh in ohs}
            matrix = _full_matrix(ohs, rng, 1, 200)
            reports = []
            for eh in range(rng.randint(1, 8)):
                edges = {oh.id: (float(rng.randint(1, 200)) if rng.random() < 0.8 else None) for oh in ohs}
                if all(v is None for v in edges.values()):
                    edges[0] = 100.0
                reports.append(report_for(eh, edges))
            greedy = greedy_assignment(reports, matrix, loads, w_load)
            greedy_us = assignment_total_cost(greedy, reports, matrix, loads, w_load)
            best = global_optimal_assignment(reports, matrix, loads, w_load)
            assert greedy_us >= best.total_us
            gaps.append(greedy_us - best.total_us)
        assert min(gaps) == 0


class TestFailures:
    def _populated(self):
        matrix = InterOhLatencyMatrix({(A, B): 10.0, (A, C): 10.0, (B, C): 10.0})
        state = _state(matrix, {A: 0.0, B: 0.0, C: 0.0})
        distribute(report_for(0, {0: 5.0, 1: 50.0, 2: 90.0}), state)
        distribute(report_for(1, {0: 90.0, 1: 5.0, 2: 90.0}), state)
        distribute(report_for(2, {0: 5.0, 1: 90.0, 2: 90.0}), state)
        return state

    def test_releases_exactly_its_ehs(self):
        state = self._populated()
        assert state.chosen == {A, B}
        affected = handle_oh_failure(A, state)
        assert affected == [NodeId.eh(0), NodeId.eh(2)]
        assert state.chosen == {B}
        assert state.chosen_sum_us == 0
        assert set(state.assignments) == {NodeId.eh(1)}
        assert A not in state.alive_ohs()

    def test_dead_oh_not_chosen_again(self):
        state = self._populated()
        handle_oh_failure(A, state)
        assert distribute(report_for(0, {0: 1.0, 1: 50.0, 2: 40.0}), state).oh == B

    def test_unknown_oh(self):
        with pytest.raises(UnknownNodeError):
            handle_oh_failure(D, self._populated())

    def test_load_report_revives(self):
        state = self._populated()
        handle_oh_failure(C, state)
        update_load(C, 0.3, state, now_ms=100.0)
        assert C in state.alive_ohs()
        assert state.oh_table[C].reported_load == 0.3

    def test_load_range(self):
        with pytest.raises(McastError):
            update_load(A, 1.5, self._populated())

    def test_sweep_after_missed_reports(self):
        state = self._populated()
        for oh in (A, B, C):
            update_load(oh, 0.0, state, now_ms=0.0)
        update_load(B, 0.0, state, now_ms=14_000.0)
        update_load(C, 0.0, state, now_ms=14_000.0)
        assert sweep_stale(state, 14_999.0, 5000.0, 3) == {}
        released = sweep_stale(state, 15_000.0, 5000.0, 3)
        assert released == {A: [NodeId.eh(0), NodeId.eh(2)]}


class TestMonitorService:
    def test_burst_queues(self):
        rng = random.Random(1)
        ohs = [NodeId.oh(i) for i in range(5)]
        state = _state(_full_matrix(ohs, rng), {oh: 0.0 for oh in ohs})
        service = MonitorService(state, TimingParams())
        decisions = [service.submit(report_for(eh, {oh.id: 10.0 + oh.id for oh in ohs}), 0.0)
                     for eh in range(10)]
        starts = [d.start_ms for d in decisions]
        assert starts == sorted(starts)
        assert all(b.start_ms == a.finish_ms for a, b in zip(decisions, decisions[1:]))
        assert decisions[-1].response_ms > decisions[0].response_ms
        assert decisions[0].decision_us == pytest.approx(5 * 0.2)

    def test_measured_time_does_not_move_virtual_clock(self):
        ohs = [NodeId.oh(i) for i in range(3)]
        state = _state(_full_matrix(ohs, random.Random(2)), {oh: 0.0 for oh in ohs})
        service = MonitorService(state, TimingParams())
        decision = service.submit(report_for(0, {oh.id: 10.0 for oh in ohs}), 0.0)
        assert decision.measured_us > 0.0
        assert decision.decision_us == pytest.approx(3 * 0.2)
        timing = TimingParams()
        assert decision.response_ms == pytest.approx(timing.mh_service_ms + 3 * timing.decision_op_us / 1000.0)

    def test_rejected_request_still_served(self):
        state = _state(InterOhLatencyMatrix(), {A: 0.0})
        service = MonitorService(state, TimingParams())
        decision = service.submit(report_for(0, {0: None}), 2.0)
        assert decision.assignment is None
        assert decision.finish_ms == 3.0

    def test_log(self, tmp_path):
        state = _state(InterOhLatencyMatrix({(A, B): 1.0}), {A: 0.0, B: 0.0})
        service = MonitorService(state, TimingParams())
        service.submit(report_for(0, {0: 12.5, 1: 30.0}), 0.0)
        path = service.write_log(tmp_path / "mh" / "assignments.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["eh_id", "oh_id", "cost_ms", "decision_us"]
        assert frame.iloc[0]["eh_id"] == "eh0"
        assert frame.iloc[0]["oh_id"] == "oh0"
        assert frame.iloc[0]["cost_ms"] == 12.5
