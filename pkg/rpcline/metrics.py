"""Per-request ledgers and run summaries.

Every delivered request carries a ledger of the steps it paid for. Latency is
measured from packet arrival to response on the wire; dispatch overhead from
packet arrival to the first handler instruction.
"""

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .models import CostModel, Path


class ConservationError(Exception):
    """Arrivals do not balance completions, drops and in-flight requests."""
    pass


class LedgerEntry(NamedTuple):
    step: str
    ns: int
    cpu: bool


@dataclass
class RequestLedger:
    """What one request paid, step by step."""
    request_id: int
    service_id: int
    path: Path
    arrival: int
    handler_start: int = -1
    wire: int = -1
    entries: list[LedgerEntry] = field(default_factory=list)

    def charge(self, step: str, ns: int, cpu: bool = True) -> None:
        self.entries.append(LedgerEntry(step, ns, cpu))

    def step_ns(self, step: str) -> int:
        return sum(e.ns for e in self.entries if e.step == step)

    @property
    def cpu_ns(self) -> int:
        return sum(e.ns for e in self.entries if e.cpu)

    @property
    def dispatch_cpu_ns(self) -> int:
        """CPU time spent getting to the handler and sending the response."""
        return sum(e.ns for e in self.entries if e.cpu and e.step != "handler")

    @property
    def dispatch_overhead(self) -> int:
        return self.handler_start - self.arrival

    @property
    def latency(self) -> int:
        return self.wire - self.arrival

    @property
    def complete(self) -> bool:
        return self.wire >= 0


def percentile(sorted_values: list[int], p: float) -> int:
    """Nearest-rank percentile of an ascending list."""
    if not sorted_values:
        return 0
    rank = math.ceil(p / 100 * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


@dataclass
class PathSummary:
    """One row of the results table.

    ``p*_ns`` and ``max_ns`` are end-system latency, ``dispatch_*`` the
    dispatch overhead of the same requests.
    """
    path: str
    count: int = 0
    p50_ns: int = 0
    p90_ns: int = 0
    p99_ns: int = 0
    max_ns: int = 0
    dispatch_p50_ns: int = 0
    dispatch_p90_ns: int = 0
    dispatch_p99_ns: int = 0
    dispatch_max_ns: int = 0
    cycles_total: int = 0
    cycles_dispatch: int = 0
    spin_cycles: int = 0
    drops: int = 0

    COLUMNS = ("path", "count", "p50_ns", "p90_ns", "p99_ns", "max_ns",
               "dispatch_p50_ns", "dispatch_p90_ns", "dispatch_p99_ns", "dispatch_max_ns",
               "cycles_total", "cycles_dispatch", "spin_cycles", "drops")

    def as_row(self) -> list[str]:
        return [str(getattr(self, name)) for name in self.COLUMNS]


def _summary(path: str, ledgers: list[RequestLedger], cost: CostModel) -> PathSummary:
    latencies = sorted(ledger.latency for ledger in ledgers)
    overheads = sorted(ledger.dispatch_overhead for ledger in ledgers)
    return PathSummary(
        path=path,
        count=len(ledgers),
        p50_ns=percentile(latencies, 50),
        p90_ns=percentile(latencies, 90),
        p99_ns=percentile(latencies, 99),
        max_ns=latencies[-1] if latencies else 0,
        dispatch_p50_ns=percentile(overheads, 50),
        dispatch_p90_ns=percentile(overheads, 90),
        dispatch_p99_ns=percentile(overheads, 99),
        dispatch_max_ns=overheads[-1] if overheads else 0,
        cycles_total=sum(cost.cycles(ledger.cpu_ns) for ledger in ledgers),
        cycles_dispatch=sum(cost.cycles(ledger.dispatch_cpu_ns) for ledger in ledgers),
    )


def summarize(
    ledgers: Iterable[RequestLedger],
    cost: CostModel,
    drops: int = 0,
    spin_cycles: int = 0,
    spin_path: str = Path.BASELINE_BYPASS.value,
    skip_before: int = 0,
) -> list[PathSummary]:
    """Aggregate completed ledgers into one row per path plus a ``dropped`` row.

    Args:
        ledgers: Ledgers of the run (incomplete ones are ignored)
        cost: Converts ledger nanoseconds to cycles
        drops: Dropped request count
        spin_cycles: Idle polling cycles, reported on ``spin_path``'s row
        spin_path: Row that carries the spin cycles
        skip_before: Ignore requests that arrived earlier (warm-up)
    """
    by_path: dict[str, list[RequestLedger]] = defaultdict(list)
    for ledger in ledgers:
        if ledger.complete and ledger.arrival >= skip_before:
            by_path[ledger.path.value].append(ledger)
    if spin_cycles and spin_path not in by_path:
        by_path[spin_path] = []

    rows = [_summary(path, by_path[path], cost) for path in sorted(by_path)]
    for row in rows:
        if row.path == spin_path:
            row.spin_cycles = spin_cycles
    rows.append(PathSummary(path=Path.DROPPED.value, count=drops, drops=drops))
    return rows


def path_fractions(ledgers: Iterable[RequestLedger], skip_before: int = 0) -> dict[str, float]:
    """Share of completed requests per path."""
    counts: dict[str, int] = defaultdict(int)
    for ledger in ledgers:
        if ledger.complete and ledger.arrival >= skip_before:
            counts[ledger.path.value] += 1
    total = sum(counts.values())
    return {path: n / total for path, n in counts.items()} if total else {}


def check_conservation(
    arrivals: int,
    completed: int,
    dropped: int,
    in_flight: int = 0,
    duplicates: int = 0,
) -> None:
    """Raise unless every arrival is accounted for exactly once."""
    if duplicates:
        raise ConservationError(f"{duplicates} responses were transmitted more than once")
    if arrivals != completed + dropped + in_flight:
        raise ConservationError(
            f"arrivals {arrivals} != completed {completed} + dropped {dropped}"
            f" + in flight {in_flight}"
        )


@dataclass
class RunMetrics:
    """Everything a finished run reports."""
    model: str
    seed: int
    workload_hash: str
    sim_time_ns: int
    arrivals: int
    completed: int
    dropped: int
    rows: list[PathSummary]
    in_flight: int = 0
    counters: dict[str, int] = field(default_factory=dict)
    fractions: dict[str, float] = field(default_factory=dict)

    def row(self, path: str) -> PathSummary | None:
        return next((r for r in self.rows if r.path == path), None)
