"""Tests for protocol.py module.

Tests the CONTROL line protocol: stalled loads, TRY_AGAIN timers, strict
alternation of the line pair, response fetches and RETIRE.
"""

import pytest

from rpcline import protocol
from rpcline.machine import Machine
from rpcline.models import (
    Content,
    CoreMode,
    CostModel,
    FlowKey,
    Holder,
    MessageKind,
    NicConfig,
    RequestStatus,
    Ring,
    RpcRequest,
    SchedulerConfig,
    Service,
)
from rpcline.nic import service_port
from rpcline.protocol import ProtocolViolation
from rpcline.simulate import Simulator
from rpcline.workload import CLIENT_ADDR_BASE, SERVER_ADDR

MS = 1_000_000


def make_machine(cores=1, services=1, timed=True, **sched):
    """Machine with one user endpoint per service and no rebalancing."""
    return Machine(
        CostModel(),
        NicConfig(endpoints_per_service=1, rebalance=False),
        SchedulerConfig(schedule_period_ns=0, **sched),
        cores,
        [Service(s) for s in range(services)],
        timed=timed,
        record_trace=True,
    )


def make_request(request_id, service=0, at=0, args_len=64, cycles=2000):
    flow = FlowKey(CLIENT_ADDR_BASE, 1024 + request_id, SERVER_ADDR, service_port(service))
    return RpcRequest(request_id, flow, service, 0, args_len, at, cycles)


def user_endpoint(m, service=0):
    return m.endpoints[m.services[service].endpoints[0]]


class TestTryAgain:
    """Tests for the TRY_AGAIN timer."""

    def test_idle_dispatcher_times_out_every_period(self):
        """Should answer an idle load exactly every 15 ms."""
        m = make_machine()
        Simulator(m, 100 * MS, stop_when_idle=False).run()

        times = [r.time for r in m.trace if r.kind == "try_again"]
        assert times == [15 * MS * k for k in range(1, 7)]

    def test_stale_timer_is_ignored(self):
        """Should ignore a timer whose deadline does not match the pending load."""
        m = make_machine()
        m.boot()
        m.now = 5

        assert protocol.on_timeout(m, 0, m.kernel_line(0)) is None
        assert m.lines[m.kernel_line(0)].pending is not None

    def test_timer_for_other_core_is_ignored(self):
        """Should ignore a timer of a core that is not waiting on the line."""
        m = make_machine(cores=2)
        m.boot()
        m.now = CostModel().try_again_timeout

        assert protocol.on_timeout(m, 1, m.kernel_line(0)) is None

    def test_untimed_timer_fires_any_time(self):
        """Should release the load in an untimed machine without a deadline check."""
        m = make_machine(timed=False)
        m.boot()

        assert all(delay == 0 for delay, _ in m.take_outbox())
        message = protocol.on_timeout(m, 0, m.kernel_line(0))

        assert message.kind == MessageKind.TRY_AGAIN
        assert message.request_id == -1

    def test_try_again_leaves_line_shared_without_payload(self):
        """Should leave the line shared by the core with TRY_AGAIN contents."""
        m = make_machine(timed=False)
        m.boot()
        line_id = m.kernel_line(0)
        m.cores[0].ring = Ring.USER  # yields instead of reloading

        protocol.nic_try_again(m, line_id)

        line = m.lines[line_id]
        assert line.content == Content.TRY_AGAIN
        assert line.content_request == -1


class TestAlternation:
    """Tests for the alternating CONTROL line pair."""

    def test_requests_alternate_between_lines(self):
        """Should fulfill consecutive requests on alternating lines."""
        m = make_machine(warm_start=True)
        sim = Simulator(m, 10 * MS)
        sim.feed([make_request(i, at=i * 100_000) for i in range(4)])
        sim.run()

        control = user_endpoint(m).control_lines
        fulfilled = [r.line for r in m.trace if r.kind == "fulfill"]
        assert fulfilled == [control[0], control[1], control[0], control[1]]

    def test_next_fulfill_waits_for_previous_transmit(self):
        """Should transmit a response before fulfilling the core's next load."""
        m = make_machine(warm_start=True)
        sim = Simulator(m, 10 * MS)
        sim.feed([make_request(i, at=0) for i in range(3)])
        sim.run()

        times = {(r.kind, r.request_id): r.time for r in m.trace}
        for i in range(1, 3):
            assert times[("transmit", i - 1)] <= times[("fulfill", i)]

    def test_single_request_is_transmitted(self):
        """Should put the response on the wire although no later load is fulfilled."""
        m = make_machine(warm_start=True)
        sim = Simulator(m, 10 * MS)
        sim.feed([make_request(0)])
        sim.run()

        assert m.status[0] == RequestStatus.COMPLETED
        assert [r.request_id for r in m.trace if r.kind == "transmit"] == [0]
        core = m.cores[0]
        assert core.mode == CoreMode.STALLED
        assert core.line == user_endpoint(m).control_lines[1]

    def test_response_leaves_from_delivery_line(self):
        """Should fetch the response from the CONTROL line the request arrived on."""
        m = make_machine(warm_start=True)
        sim = Simulator(m, 10 * MS)
        sim.feed([make_request(i, at=i * 100_000) for i in range(2)])
        sim.run()

        delivered = {r.request_id: r.line for r in m.trace if r.kind == "fulfill"}
        written = {r.request_id: r.line for r in m.trace if r.kind == "response"}
        fetched = {r.request_id: r.line for r in m.trace if r.kind == "fetch_exclusive"}
        assert written == delivered
        assert fetched == delivered

    def test_endpoint_line_sets_are_disjoint(self):
        """Should give each endpoint its own CONTROL pair and auxiliary lines, packed back to back."""
        m = make_machine(cores=2, services=2)
        owned = [line for ep in m.endpoints for line in (*ep.control_lines, *ep.aux_lines)]

        assert sorted(owned) == list(range(len(owned)))
        assert sorted(m.lines) == sorted(line for ep in m.endpoints for line in ep.control_lines)


class TestCoreLoad:
    """Tests for core_load errors."""

    def test_load_while_stalled(self):
        """Should reject a second load from a stalled core."""
        m = make_machine()
        m.boot()

        with pytest.raises(ProtocolViolation):
            protocol.core_load(m, 0, m.kernel_line(0))

    def test_load_on_line_with_pending_load(self):
        """Should reject a load on a line another core is waiting on."""
        m = make_machine(cores=2)
        m.boot()
        m.cores[1].mode = CoreMode.KERNEL_LOOP

        with pytest.raises(ProtocolViolation, match="pending load"):
            protocol.core_load(m, 1, m.kernel_line(0))

    def test_load_on_line_exclusive_elsewhere(self):
        """Should reject a load on a line another core holds exclusive."""
        m = make_machine(cores=2)
        line_id = user_endpoint(m).active_line
        protocol.write_response(m, 0, line_id, 0)

        with pytest.raises(ProtocolViolation, match="exclusive"):
            protocol.core_load(m, 1, line_id)

    def test_write_to_line_exclusive_elsewhere(self):
        """Should reject a response written into another core's exclusive line."""
        m = make_machine(cores=2)
        line_id = user_endpoint(m).active_line
        protocol.write_response(m, 0, line_id, 0)

        with pytest.raises(ProtocolViolation):
            protocol.write_response(m, 1, line_id, 1)


class TestNicFulfill:
    """Tests for nic_fulfill function."""

    def test_queues_without_pending_load(self):
        """Should queue the record on the endpoint when nobody waits."""
        m = make_machine()
        m.admit(make_request(0))
        endpoint = user_endpoint(m)

        assert protocol.nic_fulfill(m, endpoint.active_line, 0) is None
        assert list(endpoint.queue) == [0]

    def test_fulfill_flips_active_line(self):
        """Should hand the line to the waiting core and switch the active line."""
        m = make_machine(warm_start=True)
        m.boot()
        m.admit(make_request(0))
        endpoint = user_endpoint(m)
        line_id = endpoint.active_line

        message = protocol.nic_fulfill(m, line_id, 0)

        assert message.kind == MessageKind.FULFILL
        assert endpoint.active_index == 1
        assert m.lines[line_id].holder == Holder.SHARED
        assert m.lines[line_id].pending is None
        assert m.status[0] == RequestStatus.DELIVERED


class TestRetire:
    """Tests for retire_thread function."""

    def test_retires_stalled_dispatcher(self):
        """Should release the dispatcher's load and park the core."""
        m = make_machine()
        m.boot()

        message = protocol.retire_thread(m, 0)

        assert message.kind == MessageKind.RETIRE
        assert m.cores[0].mode == CoreMode.IDLE
        assert m.cores[0].ring == Ring.NONE
        assert m.mirror.queues[0][-1].ring == Ring.NONE

    def test_refuses_user_endpoint(self):
        """Should never RETIRE a user loop."""
        m = make_machine(warm_start=True)
        m.boot()

        with pytest.raises(ProtocolViolation, match="user endpoint"):
            protocol.retire_thread(m, 0)

    def test_refuses_running_core(self):
        """Should refuse a core that is not stalled."""
        m = make_machine()

        with pytest.raises(ProtocolViolation, match="not stalled"):
            protocol.retire_thread(m, 0)


class TestFetch:
    """Tests for the response fetch."""

    def test_fetch_without_response(self):
        """Should flag a fetch that finds no response as a duplicate-send hazard."""
        m = make_machine()
        m.boot()

        with pytest.raises(ProtocolViolation) as excinfo:
            protocol.finish_fetch(m, 0, user_endpoint(m).active_line, 0)
        assert excinfo.value.prop == "single_response"
