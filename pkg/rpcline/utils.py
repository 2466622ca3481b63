"""Utility functions for the rpcline CLI.

Provides the shared Rich console, logging setup, status lines, time and count
formatting, and the results table.
"""

import logging

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .metrics import PathSummary, RunMetrics


console = Console()
err_console = Console(stderr=True)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    """Route library logging through Rich.

    Args:
        verbose: Show DEBUG records
        quiet: Show errors only and silence normal console output
    """
    level = logging.DEBUG if verbose else logging.ERROR if quiet else logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )
    console.quiet = quiet


def format_ns(ns: int) -> str:
    """Format a simulated duration in human-readable units.

    Args:
        ns: Duration in nanoseconds

    Returns:
        Formatted string (e.g., "1.5 us")
    """
    value = float(ns)
    for unit in ['ns', 'us', 'ms']:
        if abs(value) < 1000:
            return f"{value:.1f} {unit}" if unit != 'ns' else f"{int(value)} ns"
        value /= 1000
    return f"{value:.3f} s"


def format_count(n: int) -> str:
    return f"{n:,}"


def results_table(metrics: RunMetrics, title: str = "") -> Table:
    """Rich table of the per-path report rows."""
    table = Table(title=title or f"{metrics.model} (seed {metrics.seed})")
    table.add_column("Path", style="cyan")
    table.add_column("Count", justify="right")
    table.add_column("p50", justify="right")
    table.add_column("p99", justify="right")
    table.add_column("Max", justify="right")
    table.add_column("Dispatch p50", justify="right")
    table.add_column("Dispatch p99", justify="right")
    table.add_column("Dispatch cycles", justify="right")
    table.add_column("Spin cycles", justify="right", style="dim")

    for row in metrics.rows:
        table.add_row(*_cells(row))
    return table


def _cells(row: PathSummary) -> list[str]:
    return [
        row.path,
        format_count(row.count),
        format_ns(row.p50_ns),
        format_ns(row.p99_ns),
        format_ns(row.max_ns),
        format_ns(row.dispatch_p50_ns),
        format_ns(row.dispatch_p99_ns),
        format_count(row.cycles_dispatch),
        format_count(row.spin_cycles),
    ]


def print_success(message: str) -> None:
    """Print a success message with checkmark.

    Args:
        message: Message to print
    """
    console.print(f"[green]✓[/green] {message}")


def print_error(message: str) -> None:
    """Print an error message with X mark.

    Errors go to stderr and survive --quiet.

    Args:
        message: Message to print
    """
    err_console.print(f"[red]✗[/red] {message}")


def print_warning(message: str) -> None:
    """Print a warning message with exclamation mark.

    Args:
        message: Message to print
    """
    console.print(f"[yellow]![/yellow] {message}")
