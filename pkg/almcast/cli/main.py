"""
mcast CLI - figure runs, failure drill, loopback smoke test and live nodes.
"""

import asyncio
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from ..core.experiments import FIGURES, run_failure_drill, run_figure
from ..live.endhost import EndHostClient
from ..live.monitor import MonitorServer
from ..live.overlay import OverlayNode, parse_peers
from ..live.smoke import run_real_smoke
from ..live.transport import parse_addr
from ..models.config import McastConfig
from ..models.scenario import NodeId, ScenarioSpec, dump_scenario, load_scenario, scenario_hash
from ..models.strategy import parse_strategy
from ..utils.logger import get_logger, setup_logger

# Initialize CLI
app = typer.Typer(
    name="mcast",
    help="📡 mcast - Application-layer multicast overlay",
    no_args_is_help=True
)
console = Console()

DEFAULT_SCENARIO = """\
[oh] preset=table1-40oh
[eh] preset=table2-1000eh
[link] preset=zones-tail
"""


def _setup(verbose: bool) -> McastConfig:
    config = McastConfig.from_env()
    level = "DEBUG" if verbose else config.log_level
    setup_logger(level=level, format_type=config.log_format, log_file=config.log_file)
    return config


def _scenario(path: Optional[Path], seed: Optional[int], default_seed: int = 0) -> ScenarioSpec:
    if path is not None:
        if not path.exists():
            raise FileNotFoundError(f"scenario file not found: {path}")
        spec = load_scenario(path.read_text(encoding="utf-8"))
    else:
        spec = load_scenario(DEFAULT_SCENARIO)
        seed = default_seed if seed is None else seed
    return spec if seed is None else spec.with_overrides(seed=seed)


def _fail(logger, what: str, e: Exception) -> None:
    logger.error(f"{what} failed: {e}")
    console.print(f"[red]❌ Error: {escape(str(e))}[/red]")
    raise typer.Exit(1)


@app.command()
def fig(
    preset: str = typer.Option(..., "--preset", "-p", help=f"Figure: {', '.join(FIGURES)}"),
    scenario: Optional[Path] = typer.Option(None, "--scenario", "-s", help="Scenario file"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the scenario seed"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory for the CSV"),
    strategy: Optional[str] = typer.Option(None, "--strategy", help="Strategy for fig3/fig5"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Run one figure on the simulated network and write its CSV."""

    config = _setup(verbose)
    logger = get_logger("almcast.cli")

    try:
        spec = _scenario(scenario, seed, config.default_seed)
        kwargs = {}
        if strategy and preset in ("fig3", "fig5"):
            kwargs["strategy"] = parse_strategy(strategy)

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            TimeElapsedColumn(),
            console=console
        ) as progress:
            task = progress.add_task(f"Running {preset} (seed {spec.seed})...", total=None)
            result = run_figure(preset, spec, **kwargs)
            progress.update(task, completed=1)

        path = result.write(out or config.output_dir)

        table = Table(title=f"📊 {preset} ({result.scenario_hash})")
        for column in result.columns:
            table.add_column(column, style="cyan" if column == result.columns[0] else "green")
        for row in result.rows:
            table.add_row(*(f"{row[c]:.3f}" if isinstance(row[c], float) else str(row[c]) for c in result.columns))
        console.print(table)
        console.print(f"\n[green]✅ Wrote {path}[/green]")

    except typer.Exit:
        raise
    except Exception as e:
        _fail(logger, preset, e)


@app.command()
def drill(
    scenario: Path = typer.Option(Path("scenarios/failure-drill.scn"), "--scenario", "-s", help="Scenario file"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the scenario seed"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Kill the busiest OH of a simulated deployment and check the recovery."""

    _setup(verbose)
    logger = get_logger("almcast.cli")

    try:
        spec = _scenario(scenario, seed)
        report = run_failure_drill(spec, strategy=spec.strategy)

        table = Table(title=f"💥 Failure drill: {report.killed} killed")
        table.add_column("EH", style="cyan")
        table.add_column("Before", style="white")
        table.add_column("After", style="green")
        for eh in report.affected:
            table.add_row(str(eh), str(report.before[eh]), str(report.after[eh]))
        console.print(table)
        console.print(f"Recovered in {report.recovery_ms / 1000.0:.1f} s (virtual)")
        if report.broadcast is not None:
            console.print(f"Broadcast exactly once: {report.broadcast.exactly_once}")
        if not report.passed:
            console.print("[red]❌ Drill failed[/red]")
            raise typer.Exit(1)
        console.print("[green]✅ Drill passed[/green]")

    except typer.Exit:
        raise
    except Exception as e:
        _fail(logger, "drill", e)


@app.command()
def smoke(
    base_port: int = typer.Option(47100, "--base-port", help="MH port; OHs take the next three"),
    host: str = typer.Option("127.0.0.1", "--host", help="Loopback address"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Loopback run with 1 MH, 3 OH and 5 EH over real sockets."""

    _setup(verbose)
    logger = get_logger("almcast.cli")

    try:
        report = asyncio.run(run_real_smoke(base_port=base_port, host=host))

        table = Table(title="🔌 Socket smoke test")
        table.add_column("Check", style="cyan")
        table.add_column("Result", style="white")
        table.add_column("Detail", style="dim")
        for check in report.checks:
            table.add_row(check.name, "[green]ok[/green]" if check.passed else "[red]FAILED[/red]", escape(check.detail))
        console.print(table)
        if report.error:
            console.print(f"[red]Aborted: {escape(report.error)}[/red]")
        if not report.passed:
            console.print(f"[red]❌ Smoke test failed after {report.elapsed_s:.1f} s[/red]")
            raise typer.Exit(1)
        console.print(f"[green]✅ Smoke test passed in {report.elapsed_s:.1f} s[/green]")

    except typer.Exit:
        raise
    except Exception as e:
        _fail(logger, "smoke", e)


@app.command()
def mh(
    listen: str = typer.Option("127.0.0.1:47000", "--listen", "-l", help="host:port to listen on"),
    w_load: Optional[float] = typer.Option(None, "--w-load", help="Load penalty, ms per unit load"),
    load_interval_ms: Optional[float] = typer.Option(None, "--load-interval-ms", help="Expected OH report period"),
    log_csv: Optional[Path] = typer.Option(None, "--log-csv", help="Assignment log (default: output dir)"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Run the monitor host."""

    config = _setup(verbose)
    logger = get_logger("almcast.cli")

    try:
        parse_addr(listen)
        overrides = {} if load_interval_ms is None else {"load_interval_ms": load_interval_ms}
        server = MonitorServer(
            NodeId.mh(0), listen, config.timing(**overrides),
            w_load=config.w_load if w_load is None else w_load,
            log_path=log_csv or config.output_dir / "assignments.csv",
        )
        console.print(Panel(f"Monitor listening on {listen}", title="📡 mcast mh", border_style="blue"))
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        console.print("[yellow]Stopped[/yellow]")
    except Exception as e:
        _fail(logger, "monitor", e)


@app.command()
def oh(
    node_id: int = typer.Option(..., "--id", help="OH id"),
    listen: str = typer.Option(..., "--listen", "-l", help="host:port to listen on"),
    mh_addr: str = typer.Option("127.0.0.1:47000", "--monitor", "--mh", help="Monitor address"),
    peers: str = typer.Option("", "--peers", help="Comma-separated OH addresses, entry i is oh<i> (default: ask the monitor)"),
    load: Optional[float] = typer.Option(None, "--load", help="Fixed load in [0, 1] instead of the CPU sample"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Run an overlay host."""

    config = _setup(verbose)
    logger = get_logger("almcast.cli")

    try:
        parse_addr(listen)
        node = OverlayNode(NodeId.oh(node_id), listen, config.timing(), mh_addr=mh_addr,
                           peers=parse_peers(peers), load=load)
        console.print(Panel(f"oh{node_id} listening on {listen}, monitor {mh_addr}",
                            title="📡 mcast oh", border_style="blue"))
        asyncio.run(node.run())
    except KeyboardInterrupt:
        console.print("[yellow]Stopped[/yellow]")
    except Exception as e:
        _fail(logger, "overlay host", e)


@app.command()
def eh(
    node_id: int = typer.Option(..., "--id", help="EH id"),
    mh_addr: str = typer.Option("127.0.0.1:47000", "--monitor", "--mh", help="Monitor address"),
    strategy: str = typer.Option("apptimeout:10000", "--strategy", help="Probe strategy"),
    send: int = typer.Option(0, "--send", help="Messages to publish once streaming"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Run an end host: measure, join and stream."""

    config = _setup(verbose)
    logger = get_logger("almcast.cli")

    async def run_client() -> None:
        client = EndHostClient(NodeId.eh(node_id), mh_addr, config.timing(), parse_strategy(strategy))
        oh_id = await client.join()
        report = client.reports[-1]
        console.print(f"[green]✅ eh{node_id} streaming via {oh_id} (M_i {report.m_i_ms:.1f} ms)[/green]")
        for i in range(send):
            await client.send_data(f"eh{node_id}-{i}".encode())
        try:
            while True:
                await asyncio.sleep(1.0)
                if client.received:
                    origin, msg_id = client.received[-1]
                    logger.debug(f"received {len(client.received)} message(s), last {origin}#{msg_id}")
        finally:
            await client.stop()

    try:
        asyncio.run(run_client())
    except KeyboardInterrupt:
        console.print("[yellow]Stopped[/yellow]")
    except Exception as e:
        _fail(logger, "end host", e)


@app.command()
def scenario(
    path: Path = typer.Argument(..., help="Scenario file"),
    dump: bool = typer.Option(False, "--dump", help="Print the normalized scenario"),
):
    """Validate a scenario file and show its summary and hash."""

    try:
        if not path.exists():
            console.print(f"[red]❌ Error: Scenario file not found: {path}[/red]")
            raise typer.Exit(1)
        spec = load_scenario(path.read_text(encoding="utf-8"))

        table = Table(title=f"🗺️ {path.name}")
        table.add_column("Setting", style="cyan")
        table.add_column("Value", style="green")
        table.add_row("Hash", scenario_hash(spec))
        table.add_row("OHs", str(len(spec.oh_nodes)))
        table.add_row("EHs", str(len(spec.eh_nodes)))
        table.add_row("Regions", ", ".join(spec.regions()))
        table.add_row("Strategy", spec.strategy.label)
        table.add_row("Seed", str(spec.seed))
        table.add_row("w_load", str(spec.w_load))
        table.add_row("Failures", str(len(spec.failure_schedule)))
        console.print(table)
        if dump:
            console.print(dump_scenario(spec), markup=False, highlight=False)

    except typer.Exit:
        raise
    except Exception as e:
        console.print(f"[red]❌ Error: {escape(str(e))}[/red]")
        raise typer.Exit(1)


@app.command()
def config():
    """Show current configuration."""

    try:
        config = McastConfig.from_env()

        config_table = Table(title="⚙️ mcast Configuration")
        config_table.add_column("Setting", style="cyan")
        config_table.add_column("Value", style="green")

        config_table.add_row("Log Level", config.log_level)
        config_table.add_row("Log Format", config.log_format)
        config_table.add_row("Log File", str(config.log_file) if config.log_file else "Not set")
        config_table.add_row("Output Directory", str(config.output_dir))
        config_table.add_row("Default Seed", str(config.default_seed))
        config_table.add_row("w_load", str(config.w_load))
        config_table.add_row("Load Interval", f"{config.load_interval_ms:g} ms")
        config_table.add_row("Missed Reports", str(config.missed_reports))
        config_table.add_row("Probe Timeout", f"{config.probe_timeout_ms:g} ms")
        config_table.add_row("Connect Timeout", f"{config.connect_timeout_ms:g} ms")
        config_table.add_row("Reconnect Backoff", f"{config.reconnect_base_ms:g}..{config.reconnect_cap_ms:g} ms")
        config_table.add_row("Reconnect Retries", str(config.reconnect_max_retries))

        console.print(config_table)

    except Exception as e:
        console.print(f"[red]❌ Error: {escape(str(e))}[/red]")
        raise typer.Exit(1)


if __name__ == "__main__":
    app()
