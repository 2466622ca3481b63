"""Output files for rpcline.

Handles content hashing, output naming, workload export/import, and writing
report tables, text reports and event traces.
"""

import hashlib
import json
import re
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import PathSummary, RunMetrics
from .models import CostModel, FlowKey, RpcRequest, TraceRecord

TRACE_COLUMNS = ("time", "kind", "core", "line", "request_id")


def calculate_hash(data: bytes, length: int = 64) -> str:
    """Calculate SHA-256 hash and return the first ``length`` hex characters.

    Args:
        data: Content as bytes
        length: Hex digits to keep (64 keeps the full digest)

    Returns:
        Hex-encoded SHA-256 prefix
    """
    return hashlib.sha256(data).hexdigest()[:length]


def sanitize_name(name: str, max_length: int = 50) -> str:
    """Sanitize a string for use in output file and directory names.

    Args:
        name: String to sanitize
        max_length: Maximum length of result

    Returns:
        Lowercase snake_case string
    """
    result = name.lower()
    result = re.sub(r'[\s-]+', '_', result)
    result = re.sub(r'[^\w]', '', result)
    result = re.sub(r'_+', '_', result)
    result = result.strip('_')
    if len(result) > max_length:
        result = result[:max_length].rstrip('_')
    return result


def run_dir(out_dir: Path, model: str) -> Path:
    """Create and return the output directory of one model's run."""
    path = Path(out_dir) / sanitize_name(model)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- workloads ---------------------------------------------------------------

def request_to_dict(request: RpcRequest) -> dict:
    data = asdict(request)
    data["flow_key"] = list(request.flow_key)
    return data


def request_from_dict(data: dict) -> RpcRequest:
    """Rebuild a request from its exported form.

    Raises:
        ValueError: If keys are missing or unknown
    """
    names = {f.name for f in fields(RpcRequest)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown request keys: {sorted(unknown)}")
    values = dict(data)
    values["flow_key"] = FlowKey(*values["flow_key"])
    return RpcRequest(**values)


def canonical_lines(requests: Iterable[RpcRequest]) -> list[str]:
    return [
        json.dumps(request_to_dict(r), sort_keys=True, separators=(",", ":"))
        for r in requests
    ]


def workload_hash(requests: Iterable[RpcRequest]) -> str:
    """SHA-256 of the canonical JSON-lines export."""
    payload = "".join(line + "\n" for line in canonical_lines(requests))
    return calculate_hash(payload.encode())


def export_workload(requests: Sequence[RpcRequest], path: Path) -> str:
    """Write requests as JSON lines and return the workload hash."""
    lines = canonical_lines(requests)
    payload = "".join(line + "\n" for line in lines)
    Path(path).write_text(payload)
    return calculate_hash(payload.encode())


def load_workload(path: Path) -> list[RpcRequest]:
    """Read a JSON-lines workload, checking ids are unique and arrivals sorted.

    Raises:
        ValueError: With the offending line number
    """
    requests: list[RpcRequest] = []
    seen: set[int] = set()
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                request = request_from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{number}: {e}") from e
            if request.request_id in seen:
                raise ValueError(f"{path}:{number}: duplicate request id {request.request_id}")
            if requests and request.arrival_time < requests[-1].arrival_time:
                raise ValueError(f"{path}:{number}: arrivals out of order")
            seen.add(request.request_id)
            requests.append(request)
    return requests


# -- reports -----------------------------------------------------------------

def format_table(rows: Sequence[PathSummary]) -> str:
    """Tab-separated report table with a header row."""
    lines = ["\t".join(PathSummary.COLUMNS)]
    lines.extend("\t".join(row.as_row()) for row in rows)
    return "\n".join(lines) + "\n"


def write_report_table(metrics: RunMetrics, path: Path) -> None:
    Path(path).write_text(format_table(metrics.rows))


def format_report(metrics: RunMetrics, cost: CostModel) -> str:
    """Human-readable report: one block per path class, counters, cost model."""
    out = [
        f"model\t{metrics.model}",
        f"seed\t{metrics.seed}",
        f"workload_hash\t{metrics.workload_hash}",
        f"sim_time_ns\t{metrics.sim_time_ns}",
        f"conservation\tarrivals={metrics.arrivals} = completed={metrics.completed}"
        f" + dropped={metrics.dropped} + in_flight={metrics.in_flight}",
        "",
    ]
    for row in metrics.rows:
        out.append(f"[{row.path}]")
        for name in PathSummary.COLUMNS[1:]:
            out.append(f"{name}\t{getattr(row, name)}")
        if row.path in metrics.fractions:
            out.append(f"fraction\t{metrics.fractions[row.path]:.6f}")
        out.append("")
    out.append("[counters]")
    out.extend(f"{name}\t{value}" for name, value in sorted(metrics.counters.items()))
    out.append("")
    out.append("[cost_model]")
    out.extend(f"{f.name}\t{getattr(cost, f.name)}" for f in fields(cost))
    return "\n".join(out) + "\n"


def write_report(metrics: RunMetrics, cost: CostModel, path: Path) -> None:
    Path(path).write_text(format_report(metrics, cost))


def write_trace(records: Iterable[TraceRecord], path: Path) -> int:
    """Write the event trace as TSV; returns the number of records."""
    count = 0
    with open(path, "w") as f:
        f.write("\t".join(TRACE_COLUMNS) + "\n")
        for record in records:
            f.write(record.as_row() + "\n")
            count += 1
    return count


def read_trace(path: Path) -> list[TraceRecord]:
    records = []
    with open(path) as f:
        next(f, None)
        for line in f:
            time, kind, core, line_id, request = line.rstrip("\n").split("\t")
            records.append(TraceRecord(int(time), kind, int(core), int(line_id), int(request)))
    return records
