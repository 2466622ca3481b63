"""Tests for models.py module.

Tests cost model validation and the derived step costs, plus the
configuration dataclass checks.
"""

import pytest

from rpcline.models import (
    CheckerConfig,
    CostModel,
    CostModelError,
    Endpoint,
    NicConfig,
    ProtocolMessage,
    MessageKind,
    SchedulerConfig,
    WorkloadSpec,
)


class TestCostModel:
    """Tests for CostModel validation."""

    def test_defaults_are_valid(self):
        """Should construct with the built-in defaults."""
        cost = CostModel()
        assert cost.coherent_line_roundtrip < cost.dma_write + cost.descriptor_fetch

    def test_rejects_negative(self):
        """Should reject negative latencies."""
        with pytest.raises(CostModelError, match="context_switch"):
            CostModel(context_switch=-1)

    def test_rejects_non_integer(self):
        """Should reject fractional nanoseconds."""
        with pytest.raises(CostModelError):
            CostModel(jump_cost=2.5)

    def test_rejects_slow_line_roundtrip(self):
        """Should require the line round trip to beat DMA plus descriptor fetch."""
        with pytest.raises(CostModelError, match="coherent_line_roundtrip"):
            CostModel(coherent_line_roundtrip=1600)

    def test_rejects_zero_interrupt(self):
        """Should require interrupt delivery to cost something."""
        with pytest.raises(CostModelError, match="interrupt_delivery"):
            CostModel(interrupt_delivery=0)

    def test_rejects_tiny_line(self):
        """Should require room for the record header."""
        with pytest.raises(CostModelError, match="line_size"):
            CostModel(line_size=18)

    def test_is_a_value_error(self):
        """Should be catchable as ValueError."""
        with pytest.raises(ValueError):
            CostModel(try_again_timeout=0)


class TestDerivedCosts:
    """Tests for cycle conversion and step sums."""

    def test_cycles_round_trip(self):
        """Should convert 2000 cycles at 2 GHz to 1000 ns and back."""
        cost = CostModel()
        assert cost.cycles_to_ns(2000) == 1000
        assert cost.cycles(1000) == 2000

    def test_cycles_to_ns_rounds_up(self):
        """Should never make a handler shorter than its cycles."""
        assert CostModel().cycles_to_ns(3) == 2

    def test_software_dispatch(self):
        """Should sum unmarshal, function lookup and jump."""
        cost = CostModel()
        assert cost.software_dispatch(64) == 300 + 64 + 50 + 2

    def test_kernel_steps_with_and_without_switch(self):
        """Should add the context switch only when asked."""
        cost = CostModel()
        without = cost.kernel_steps(64, switch=False)
        assert without == 800 + 200 + 150 + 400 + cost.software_dispatch(64)
        assert cost.kernel_steps(64) == without + cost.context_switch


class TestConfigValidation:
    """Tests for the configuration dataclasses."""

    def test_checker_bounds(self):
        """Should refuse more cores than the checker supports."""
        with pytest.raises(ValueError):
            CheckerConfig(cores=4)

    def test_checker_unknown_category(self):
        """Should refuse unknown event categories."""
        with pytest.raises(ValueError, match="Unknown event categories"):
            CheckerConfig(permute=("arrival", "dma"))

    def test_workload_arrival(self):
        """Should refuse unknown arrival processes."""
        with pytest.raises(ValueError):
            WorkloadSpec(arrival="bursty")

    def test_workload_fractions(self):
        """Should refuse size class fractions above one."""
        with pytest.raises(ValueError):
            WorkloadSpec(small_fraction=0.95, medium_fraction=0.1)

    def test_nic_watermarks(self):
        """Should refuse a low watermark above the high one."""
        with pytest.raises(ValueError):
            NicConfig(hi_watermark=1, lo_watermark=2)

    def test_idle_span(self):
        """Should need at least one window of quiet before a shrink."""
        with pytest.raises(ValueError, match="idle_windows"):
            NicConfig(idle_windows=0)

    def test_ipi_origin(self):
        """Should accept only os or nic as IPI origin."""
        with pytest.raises(ValueError):
            SchedulerConfig(ipi_origin="bios")

    def test_endpoint_needs_two_control_lines(self):
        """Should refuse an endpoint with one control line."""
        with pytest.raises(ValueError):
            Endpoint(0, -1, "kernel", control_lines=(0,))

    def test_try_again_has_no_payload(self):
        """Should refuse a TRY_AGAIN message carrying a request."""
        with pytest.raises(ValueError):
            ProtocolMessage(MessageKind.TRY_AGAIN, 0, 0, request_id=5)
