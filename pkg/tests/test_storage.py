"""Tests for storage.py module.

Tests hashing, output naming, workload export and import, and the report
and trace writers.
"""

import json

import pytest

from rpcline.metrics import PathSummary, RunMetrics
from rpcline.models import CostModel, FlowKey, RpcRequest, TraceRecord
from rpcline.storage import (
    calculate_hash,
    export_workload,
    format_report,
    format_table,
    load_workload,
    read_trace,
    request_to_dict,
    run_dir,
    sanitize_name,
    workload_hash,
    write_trace,
)


@pytest.fixture
def requests():
    """Three requests in arrival order."""
    return [
        RpcRequest(i, FlowKey(1, 1000 + i, 2, 10_000), 0, 1, 64 * i, 100 * i, 2000)
        for i in range(3)
    ]


@pytest.fixture
def metrics():
    return RunMetrics(
        model="coherent",
        seed=1,
        workload_hash="ab" * 32,
        sim_time_ns=5000,
        arrivals=4,
        completed=2,
        dropped=1,
        rows=[
            PathSummary("fastpath", count=2, p50_ns=900, dispatch_p50_ns=300),
            PathSummary("dropped", 1, drops=1),
        ],
        in_flight=1,
        counters={"try_again": 4},
        fractions={"fastpath": 1.0},
    )


class TestNames:
    """Tests for calculate_hash, sanitize_name and run_dir."""

    def test_hash_length(self):
        """Should truncate the hex digest to the requested length."""
        assert len(calculate_hash(b"x", length=12)) == 12
        assert len(calculate_hash(b"x")) == 64

    def test_sanitize_model_name(self):
        """Should turn a model name into a directory name."""
        assert sanitize_name("baseline-interrupt") == "baseline_interrupt"

    def test_run_dir_created(self, tmp_path):
        """Should create one directory per model."""
        path = run_dir(tmp_path, "baseline-bypass")
        assert path.is_dir()
        assert path.name == "baseline_bypass"


class TestWorkloadFiles:
    """Tests for export_workload and load_workload."""

    def test_export_then_load(self, tmp_path, requests):
        """Should read back the same requests and hash."""
        path = tmp_path / "w.jsonl"
        digest = export_workload(requests, path)

        assert load_workload(path) == requests
        assert digest == workload_hash(requests)

    def test_hash_depends_on_content(self, requests):
        """Should change the hash when a request changes."""
        assert workload_hash(requests) != workload_hash(requests[:2])

    def test_duplicate_id(self, tmp_path, requests):
        """Should name the line of a duplicate request id."""
        path = tmp_path / "w.jsonl"
        rows = [request_to_dict(requests[0]), request_to_dict(requests[0])]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")

        with pytest.raises(ValueError, match=":2: duplicate"):
            load_workload(path)

    def test_out_of_order(self, tmp_path, requests):
        """Should refuse arrivals that go back in time."""
        path = tmp_path / "w.jsonl"
        export_workload(list(reversed(requests)), path)

        with pytest.raises(ValueError, match="out of order"):
            load_workload(path)

    def test_unknown_field(self, tmp_path, requests):
        """Should refuse unknown request fields."""
        row = request_to_dict(requests[0]) | {"priority": 1}
        path = tmp_path / "w.jsonl"
        path.write_text(json.dumps(row) + "\n")

        with pytest.raises(ValueError, match=":1:"):
            load_workload(path)


class TestReports:
    """Tests for the report and trace writers."""

    def test_table_header(self, metrics):
        """Should start the table with the column names."""
        lines = format_table(metrics.rows).splitlines()

        assert lines[0].split("\t") == list(PathSummary.COLUMNS)
        assert lines[1].startswith("fastpath\t2\t900")
        assert lines[1].split("\t")[PathSummary.COLUMNS.index("dispatch_p50_ns")] == "300"

    def test_report_sections(self, metrics):
        """Should include header, per-path blocks, counters and the cost model."""
        report = format_report(metrics, CostModel())

        assert "model\tcoherent" in report
        assert "conservation\tarrivals=4 = completed=2 + dropped=1 + in_flight=1" in report
        assert "dispatch_p50_ns\t300" in report
        assert "[fastpath]" in report
        assert "fraction\t1.000000" in report
        assert "try_again\t4" in report
        assert "coherent_line_roundtrip\t500" in report

    def test_trace_round_trip(self, tmp_path):
        """Should read back the records it wrote."""
        records = [TraceRecord(0, "load", 0, 0), TraceRecord(500, "fulfill", 0, 0, 7)]
        path = tmp_path / "trace.tsv"

        assert write_trace(records, path) == 2
        assert path.read_text().splitlines()[0] == "time\tkind\tcore\tline\trequest_id"
        assert read_trace(path) == records
