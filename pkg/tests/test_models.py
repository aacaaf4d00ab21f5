import math

import pytest

from almcast.models.config import McastConfig
from almcast.models.measurement import LatencySample, MeasurementReport, SampleStatus
from almcast.models.rng import derive_rng
from almcast.models.scenario import NodeId
from almcast.models.strategy import StrategyConfig, StrategyKind, format_strategy, parse_strategy


class TestRng:
    def test_same_key_same_stream(self):
        a = derive_rng(7, NodeId.eh(1), "connect:oh2")
        b = derive_rng(7, NodeId.eh(1), "connect:oh2")
        assert a.draws(40) == b.draws(40)

    def test_streams_are_independent(self):
        base = derive_rng(7, NodeId.eh(1), "connect:oh2").draws(8)
        assert derive_rng(8, NodeId.eh(1), "connect:oh2").draws(8) != base
        assert derive_rng(7, NodeId.eh(2), "connect:oh2").draws(8) != base
        assert derive_rng(7, NodeId.eh(1), "send:oh2").draws(8) != base

    def test_interleaving_does_not_matter(self):
        x1, y1 = derive_rng(1, NodeId.oh(0), "x"), derive_rng(1, NodeId.oh(0), "y")
        interleaved = [(x1.random(), y1.random()) for _ in range(20)]
        x2, y2 = derive_rng(1, NodeId.oh(0), "x"), derive_rng(1, NodeId.oh(0), "y")
        assert [a for a, _ in interleaved] == x2.draws(20)
        assert [b for _, b in interleaved] == y2.draws(20)

    def test_ranges(self):
        rng = derive_rng(3, NodeId.mh(), "ranges")
        for _ in range(200):
            assert 0.0 <= rng.random() < 1.0
            assert 2.0 <= rng.uniform(2.0, 4.0) < 4.0
            assert rng.exponential(5.0) >= 0.0
        assert not rng.bernoulli(0.0)
        assert rng.bernoulli(1.0)


class TestStrategy:
    @pytest.mark.parametrize("text", [
        "baseline:5", "baseline:2", "noreconnect", "apptimeout:10000", "apptimeout:2500.5",
        "partition:5+apptimeout:10000", "partition:3+baseline:5",
    ])
    def test_parse_format(self, text):
        assert format_strategy(parse_strategy(text)) == text

    def test_defaults(self):
        assert parse_strategy("baseline").max_attempts == 5
        assert parse_strategy("apptimeout").timeout_ms == 10000.0

    def test_effective_and_timeout(self):
        s = StrategyConfig.partitioned(4, StrategyConfig.app_timeout(3000))
        assert s.groups == 4
        assert s.effective.kind is StrategyKind.APP_TIMEOUT
        assert s.app_timeout_ms == 3000
        assert StrategyConfig.no_reconnect().app_timeout_ms is None
        assert StrategyConfig.baseline().groups == 1

    @pytest.mark.parametrize("text", ["never", "noreconnect:3", "partition:2", "partition:2+partition:2+baseline",
                                      "apptimeout:-1", "baseline:0"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            parse_strategy(text)


class TestMeasurement:
    def test_ok_total(self):
        s = LatencySample.ok(NodeId.oh(1), 50.0, 60.0, 60.0, 60.0)
        assert s.is_ok
        assert s.total_ms == 230.0

    def test_failed_total_is_elapsed(self):
        s = LatencySample.timed_out(NodeId.oh(1), 10000.0)
        assert s.status is SampleStatus.TIMED_OUT
        assert s.total_ms == 10000.0

    def test_inconsistent_sample_rejected(self):
        with pytest.raises(ValueError):
            LatencySample(oh=NodeId.oh(1), status=SampleStatus.CONN_FAILED, lat_ms=(1.0, 1.0, 1.0))

    def test_usable(self):
        failed = LatencySample.conn_failed(NodeId.oh(0), 75000.0)
        report = MeasurementReport(eh=NodeId.eh(0), samples=(failed,), m_i_ms=75000.0)
        assert not report.usable
        assert report.ok_samples() == []


class TestConfig:
    def test_from_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("MCAST_OUTPUT_DIR", str(tmp_path / "out"))
        monkeypatch.setenv("MCAST_SEED", "42")
        monkeypatch.setenv("MCAST_PROBE_TIMEOUT_MS", "1500")
        config = McastConfig.from_env()
        assert config.default_seed == 42
        assert config.output_dir.is_dir()
        timing = config.timing(missed_reports=2)
        assert timing.probe_timeout_ms == 1500.0
        assert timing.missed_reports == 2
        assert not math.isclose(timing.os_cap_ms, 0.0)
