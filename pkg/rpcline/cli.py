"""CLI interface for rpcline using Typer.

Main entry point for the application. Handles command definitions, option
parsing, output files, progress display and exit codes. Every command is a
thin shell over library calls.

Exit codes: 0 ok, 1 usage or config error, 2 invariant violation, 3 checker
state bound exceeded.
"""

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import typer
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn
from rich.table import Table

from .checker import (
    SemanticsMismatch,
    StateBoundExceeded,
    explore,
    read_violations,
    verify_violation,
    write_violations,
)
from .config import ConfigError, apply_overrides, config_from_dict, config_to_dict, load_config
from .metrics import ConservationError
from .models import CheckerConfig, ExperimentConfig, NicModel
from .protocol import ProtocolViolation
from .simulate import SimulationResult, run_experiment
from .storage import (
    export_workload,
    load_workload,
    run_dir,
    write_report,
    write_report_table,
    write_trace,
)
from .utils import (
    console,
    format_count,
    print_error,
    print_success,
    print_warning,
    results_table,
    setup_logging,
)
from .workload import generate

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VIOLATION = 2
EXIT_BOUND = 3

app = typer.Typer(
    name="rpcline",
    help="Simulate and model-check NIC-driven RPC dispatch over cache-coherent lines",
    add_completion=False,
)

ConfigOption = typer.Option(None, "--config", "-c", help="Experiment file (default ./rpcline.json)")
SeedOption = typer.Option(None, "--seed", help="Override the experiment seed")
OutOption = typer.Option(None, "--out", "-o", help="Output directory")
ModelOption = typer.Option(
    None, "--model", "-m", help="coherent, baseline-interrupt or baseline-bypass"
)
QuietOption = typer.Option(False, "--quiet", "-q", help="Only report errors")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Debug logging")


def _load(
    config_path: Optional[Path],
    seed: Optional[int],
    model: Optional[str],
    out: Optional[Path],
    quiet: bool,
    verbose: bool,
) -> ExperimentConfig:
    setup_logging(verbose=verbose, quiet=quiet)
    return apply_overrides(load_config(config_path), seed=seed, model=model, out_dir=out)


def _write_outputs(result: SimulationResult) -> Path:
    config = result.config
    directory = run_dir(Path(config.output.out_dir), config.model.value)
    write_report_table(result.metrics, directory / "report.tsv")
    write_report(result.metrics, config.cost_model, directory / "report.txt")
    if config.output.trace:
        write_trace(result.trace, directory / "trace.tsv")
    return directory


@app.command()
def simulate(
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    model: Optional[str] = ModelOption,
    workload: Optional[Path] = typer.Option(
        None, "--workload", "-w", help="Replay an exported JSON-lines workload", exists=True,
    ),
    warmup: float = typer.Option(
        0.0, "--warmup", help="Share of earliest requests left out of the report", min=0.0, max=1.0,
    ),
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
) -> None:
    """Run one experiment and write report.tsv, report.txt and trace.tsv."""
    try:
        config = _load(config_path, seed, model, out, quiet, verbose)
        requests = load_workload(workload) if workload else None
        with console.status(f"[bold green]Simulating {config.model.value}..."):
            result = run_experiment(config, requests=requests, warmup_fraction=warmup)
        directory = _write_outputs(result)

        console.print(results_table(result.metrics))
        print_success(
            f"{format_count(result.metrics.completed)} completed, "
            f"{format_count(result.metrics.dropped)} dropped; outputs in {directory}"
        )
    except ConfigError as e:
        print_error(f"Configuration error: {e}")
        raise typer.Exit(EXIT_CONFIG)
    except ValueError as e:
        print_error(f"Invalid input: {e}")
        raise typer.Exit(EXIT_CONFIG)
    except (ProtocolViolation, ConservationError) as e:
        print_error(f"Invariant violated: {e}")
        raise typer.Exit(EXIT_VIOLATION)
    except AssertionError as e:
        print_error(f"Internal consistency check failed: {e}")
        raise typer.Exit(EXIT_CONFIG)


@app.command()
def check(
    config_path: Optional[Path] = ConfigOption,
    out: Optional[Path] = OutOption,
    cores: Optional[int] = typer.Option(None, "--cores", help="Cores (1-3)"),
    endpoints: Optional[int] = typer.Option(None, "--endpoints", help="Services/endpoints (1-2)"),
    packets: Optional[int] = typer.Option(None, "--packets", help="Packets (1-4)"),
    preemption: Optional[bool] = typer.Option(
        None, "--preemption/--no-preemption", help="Let the environment preempt user loops",
    ),
    retire: Optional[bool] = typer.Option(
        None, "--retire/--no-retire", help="Let the environment retire dispatchers",
    ),
    seeded_bug: bool = typer.Option(
        False, "--seeded-bug", help="Fulfill loads before fetching the previous response",
    ),
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
) -> None:
    """Explore every interleaving of a bounded configuration."""
    try:
        config = _load(config_path, None, None, out, quiet, verbose)
        changes = {
            name: value for name, value in (
                ("cores", cores), ("endpoints", endpoints), ("packets", packets),
                ("enable_preemption", preemption), ("enable_retire", retire),
            ) if value is not None
        }
        if seeded_bug:
            changes["fulfill_before_fetch"] = True
        try:
            checker = dataclasses.replace(config.checker, **changes)
        except ValueError as e:
            raise ConfigError(f"checker: {e}")

        with console.status("[bold green]Exploring state space..."):
            result = explore(checker, config.cost_model)
    except ConfigError as e:
        print_error(f"Configuration error: {e}")
        raise typer.Exit(EXIT_CONFIG)
    except StateBoundExceeded as e:
        print_error(f"{e}")
        console.print(f"[dim]{format_count(e.partial.transitions)} transitions explored[/dim]")
        raise typer.Exit(EXIT_BOUND)

    directory = Path(config.output.out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    settings = config_to_dict(dataclasses.replace(config, checker=checker))
    summary = [
        f"states_visited\t{result.states_visited}",
        f"transitions\t{result.transitions}",
        f"terminal_states\t{result.terminal_states}",
        f"max_depth\t{result.max_depth}",
        f"violations\t{len(result.violations)}",
    ]
    (directory / "check.txt").write_text("\n".join(summary) + "\n")

    table = Table(title="Model check")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    for line in summary:
        name, value = line.split("\t")
        table.add_row(name, format_count(int(value)))
    console.print(table)

    if result.ok:
        print_success("No violations")
        return

    write_violations(directory / "violations.json", settings, result.violations)
    records = []
    try:
        for violation in result.violations:
            replayed = verify_violation(checker, violation, config.cost_model)
            records.extend(replayed.records)
    except SemanticsMismatch as e:
        print_error(f"Counterexample does not replay: {e}")
        raise typer.Exit(EXIT_CONFIG)
    write_trace(records, directory / "violations.tsv")
    first = result.violations[0]
    print_error(f"{len(result.violations)} violations; first {first.prop}: {first.message}")
    for event in first.events:
        console.print(f"  [dim]{event.describe()}[/dim]")
    raise typer.Exit(EXIT_VIOLATION)


@app.command()
def sweep(
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    models: str = typer.Option(
        ",".join(m.value for m in NicModel), "--models", help="Comma-separated NIC models",
    ),
    workers: int = typer.Option(3, "--workers", help="Runs in parallel", min=1),
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
) -> None:
    """Run the same workload on several NIC models and compare them."""
    try:
        base = _load(config_path, seed, None, out, quiet, verbose)
        configs = [apply_overrides(base, model=name.strip()) for name in models.split(",")]
    except ConfigError as e:
        print_error(f"Configuration error: {e}")
        raise typer.Exit(EXIT_CONFIG)

    results: list[SimulationResult] = []
    try:
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TaskProgressColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("[cyan]Simulating...", total=len(configs))
            with ThreadPoolExecutor(max_workers=workers) as executor:
                for result in executor.map(run_experiment, configs):
                    results.append(result)
                    _write_outputs(result)
                    progress.update(task, advance=1,
                                    description=f"[cyan]{result.config.model.value} done")
    except (ProtocolViolation, ConservationError) as e:
        print_error(f"Invariant violated: {e}")
        raise typer.Exit(EXIT_VIOLATION)
    except AssertionError as e:
        print_error(f"Internal consistency check failed: {e}")
        raise typer.Exit(EXIT_CONFIG)

    table = Table(title="Sweep")
    table.add_column("Model", style="cyan")
    table.add_column("Completed", justify="right")
    table.add_column("Dropped", justify="right")
    table.add_column("Workload hash", style="dim")
    for result in results:
        m = result.metrics
        table.add_row(m.model, format_count(m.completed), format_count(m.dropped),
                      m.workload_hash[:16])
    console.print(table)

    hashes = {r.metrics.workload_hash for r in results}
    if len(hashes) > 1:
        print_warning("Models saw different workloads (closed-loop arrivals depend on the model)")
    else:
        print_success(f"{len(results)} models, identical workload {next(iter(hashes))[:16]}")


@app.command()
def replay(
    violations: Path = typer.Argument(..., help="violations.json written by check", exists=True),
    out: Optional[Path] = OutOption,
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
) -> None:
    """Replay checker counterexamples through the machine and write their traces."""
    setup_logging(verbose=verbose, quiet=quiet)
    try:
        settings, found = read_violations(violations)
        config = config_from_dict(settings)
    except (ValueError, ConfigError) as e:
        print_error(f"Cannot read counterexamples: {e}")
        raise typer.Exit(EXIT_CONFIG)

    records = []
    try:
        for violation in found:
            replayed = verify_violation(config.checker, violation, config.cost_model)
            console.print(f"[dim]{violation.prop}: {len(violation.events)} events reproduced[/dim]")
            records.extend(replayed.records)
    except SemanticsMismatch as e:
        print_error(f"Replay diverged: {e}")
        raise typer.Exit(EXIT_VIOLATION)

    directory = Path(out) if out else violations.parent
    directory.mkdir(parents=True, exist_ok=True)
    write_trace(records, directory / "replay.tsv")
    print_success(f"Replayed {len(found)} counterexamples into {directory / 'replay.tsv'}")


@app.command("print-defaults")
def print_defaults(
    config_path: Optional[Path] = ConfigOption,
) -> None:
    """Print every setting as JSON (the effective config when --config is given)."""
    try:
        config = load_config(config_path) if config_path else ExperimentConfig()
    except ConfigError as e:
        print_error(f"Configuration error: {e}")
        raise typer.Exit(EXIT_CONFIG)
    typer.echo(json.dumps(config_to_dict(config), indent=2))


@app.command("export-workload")
def export_workload_cmd(
    path: Path = typer.Argument(..., help="JSON-lines file to write"),
    config_path: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
) -> None:
    """Write the configured open-loop workload for later replay."""
    try:
        config = _load(config_path, seed, None, None, quiet, verbose)
        if config.workload.arrival != "poisson":
            raise ConfigError("only open-loop (poisson) workloads can be exported ahead of a run")
        requests = list(generate(config.workload, config.workload_seed))
        digest = export_workload(requests, path)
    except ConfigError as e:
        print_error(f"Configuration error: {e}")
        raise typer.Exit(EXIT_CONFIG)
    print_success(f"{format_count(len(requests))} requests written to {path} (sha256 {digest[:16]})")


def main() -> None:
    """Main entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
