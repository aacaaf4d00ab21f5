from pathlib import Path

import pytest
from typer.testing import CliRunner

from almcast.cli.main import app
from almcast.errors import McastError
from almcast.live.smoke import SmokeReport
from almcast.models.scenario import NodeId, load_scenario, scenario_hash
from tests.conftest import UNIFORM

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

runner = CliRunner()


@pytest.fixture(autouse=True)
def quiet_env(monkeypatch):
    for name in ("MCAST_LOG_FILE", "MCAST_LOG_LEVEL", "MCAST_SEED", "MCAST_W_LOAD"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def uniform_file(tmp_path):
    path = tmp_path / "uniform.scn"
    path.write_text(UNIFORM, encoding="utf-8")
    return path


def test_config_shows_environment(monkeypatch):
    monkeypatch.setenv("MCAST_SEED", "42")
    result = runner.invoke(app, ["config"])
    assert result.exit_code == 0
    assert "mcast Configuration" in result.output
    assert "42" in result.output


def test_scenario_summary_shows_hash(uniform_file):
    result = runner.invoke(app, ["scenario", str(uniform_file)])
    assert result.exit_code == 0
    assert scenario_hash(load_scenario(UNIFORM)) in result.output


def test_scenario_dump_is_loadable(uniform_file):
    result = runner.invoke(app, ["scenario", str(uniform_file), "--dump"])
    assert result.exit_code == 0
    assert "[link]" in result.output


def test_scenario_missing_file(tmp_path):
    result = runner.invoke(app, ["scenario", str(tmp_path / "nope.scn")])
    assert result.exit_code == 1
    assert "not found" in result.output


def test_scenario_parse_error_exits(tmp_path):
    bad = tmp_path / "bad.scn"
    bad.write_text("[oh] region=a count=3\n[bogus]\n", encoding="utf-8")
    result = runner.invoke(app, ["scenario", str(bad)])
    assert result.exit_code == 1
    assert "line 2" in result.output
    assert "[bogus]" in result.output


def test_fig_writes_csv(uniform_file, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["fig", "--preset", "fig2", "--scenario", str(uniform_file), "--out", str(out)])
    assert result.exit_code == 0
    written = list(out.glob("*.csv"))
    assert len(written) == 1
    assert written[0].read_text().startswith("n_oh,construction_ms,connections")


def test_fig_unknown_preset(uniform_file):
    result = runner.invoke(app, ["fig", "--preset", "fig99", "--scenario", str(uniform_file)])
    assert result.exit_code == 1


def test_drill_passes_on_bundled_scenario():
    result = runner.invoke(app, ["drill", "--scenario", str(SCENARIOS / "failure-drill.scn")])
    assert result.exit_code == 0
    assert "Drill passed" in result.output


def test_smoke_reports_failed_checks(mocker):
    report = SmokeReport()
    report.check("complete graph built", True, "3/3")
    report.check("other EHs kept their OH", False, "moved: [eh3]")
    fake = mocker.patch("almcast.cli.main.run_real_smoke", new=mocker.AsyncMock(return_value=report))
    result = runner.invoke(app, ["smoke", "--base-port", "48000"])
    assert result.exit_code == 1
    assert "moved: [eh3]" in result.output
    fake.assert_awaited_once_with(base_port=48000, host="127.0.0.1")


def test_smoke_passes(mocker):
    report = SmokeReport()
    report.check("complete graph built", True, "3/3")
    mocker.patch("almcast.cli.main.run_real_smoke", new=mocker.AsyncMock(return_value=report))
    result = runner.invoke(app, ["smoke"])
    assert result.exit_code == 0
    assert "Smoke test passed" in result.output


def test_oh_accepts_monitor_and_peers(mocker):
    node_cls = mocker.patch("almcast.cli.main.OverlayNode")
    node_cls.return_value.run = mocker.AsyncMock()
    result = runner.invoke(app, [
        "oh", "--id", "1", "--listen", "127.0.0.1:47502",
        "--monitor", "127.0.0.1:47500",
        "--peers", "127.0.0.1:47501,127.0.0.1:47502,127.0.0.1:47503",
    ])
    assert result.exit_code == 0
    args, kwargs = node_cls.call_args
    assert args[0] == NodeId.oh(1)
    assert kwargs["mh_addr"] == "127.0.0.1:47500"
    assert kwargs["peers"] == {
        NodeId.oh(0): "127.0.0.1:47501",
        NodeId.oh(1): "127.0.0.1:47502",
        NodeId.oh(2): "127.0.0.1:47503",
    }
    assert kwargs["load"] is None
    node_cls.return_value.run.assert_awaited_once()


def test_oh_rejects_bad_peer_list(mocker):
    mocker.patch("almcast.cli.main.OverlayNode")
    result = runner.invoke(app, ["oh", "--id", "0", "--listen", "127.0.0.1:1", "--peers", "nope"])
    assert result.exit_code == 1


def test_eh_accepts_monitor(mocker):
    client_cls = mocker.patch("almcast.cli.main.EndHostClient")
    client_cls.return_value.join = mocker.AsyncMock(side_effect=McastError("no OH to measure"))
    result = runner.invoke(app, ["eh", "--id", "2", "--monitor", "127.0.0.1:47600", "--strategy", "partition:2+apptimeout:5000"])
    assert result.exit_code == 1
    args, _ = client_cls.call_args
    assert args[0] == NodeId.eh(2)
    assert args[1] == "127.0.0.1:47600"
    assert "no OH to measure" in result.output
