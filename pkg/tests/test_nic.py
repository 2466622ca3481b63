"""Tests for nic.py module.

Tests demultiplexing, dispatch decisions, the DMA threshold, the kernel
queue bound, the scheduler mirror and the rebalance watermarks.
"""

import pytest

from rpcline import nic, protocol, scheduler
from rpcline.machine import Machine
from rpcline.models import (
    CostModel,
    ExperimentConfig,
    FlowKey,
    NicConfig,
    Path,
    RebalanceRequest,
    RequestStatus,
    Ring,
    RpcRequest,
    SchedulerConfig,
    Service,
)
from rpcline.simulate import Simulator, collect_metrics
from rpcline.workload import CLIENT_ADDR_BASE, SERVER_ADDR

MS = 1_000_000


def make_machine(cores=1, services=1, nic_config=None, **sched):
    return Machine(
        CostModel(),
        nic_config or NicConfig(endpoints_per_service=1, rebalance=False),
        SchedulerConfig(schedule_period_ns=0, **sched),
        cores,
        [Service(s) for s in range(services)],
        record_trace=True,
    )


def make_request(request_id, service=0, at=0, args_len=64, port=None):
    port = nic.service_port(service) if port is None else port
    flow = FlowKey(CLIENT_ADDR_BASE, 1024 + request_id, SERVER_ADDR, port)
    return RpcRequest(request_id, flow, service, 0, args_len, at, 2000)


def run(m, requests, horizon=100 * MS):
    sim = Simulator(m, horizon)
    sim.feed(requests)
    end = sim.run()
    return sim, end


class TestDemuxTable:
    """Tests for DemuxTable class."""

    def test_lookup_by_destination_port(self):
        """Should map a flow to the service owning its destination port."""
        table = nic.DemuxTable()
        table.install(3, nic.service_port(3))

        assert table.lookup(FlowKey(1, 2, 3, nic.service_port(3))) == 3
        assert table.lookup(FlowKey(1, 2, 3, 1)) is None

    def test_port_conflict(self):
        """Should refuse to give one port to two services."""
        table = nic.DemuxTable()
        table.install(1, 80)

        with pytest.raises(ValueError):
            table.install(2, 80)

    def test_machine_installs_every_service(self):
        """Should install one port per service at construction."""
        assert len(make_machine(services=4).demux) == 4


class TestDecide:
    """Tests for decide function."""

    def test_cold_service_goes_to_dispatcher(self):
        """Should send a service with no core to a stalled kernel dispatcher."""
        m = make_machine()
        m.boot()

        assert nic.decide(m, 0) == nic.Decision(Path.KERNEL_DISPATCH, 0)

    def test_waiting_user_core_wins(self):
        """Should use the fast path when a user core waits on the service."""
        m = make_machine(warm_start=True)
        m.boot()

        decision = nic.decide(m, 0)

        assert decision.path == Path.FASTPATH
        assert decision.target == m.services[0].endpoints[0]

    def test_queued_without_any_core(self):
        """Should fall back to the kernel queue when no core can take it."""
        m = make_machine()
        m.boot()
        protocol.retire_thread(m, 0)

        assert nic.decide(m, 0).path == Path.QUEUED


class TestDmaThreshold:
    """Tests for the DMA path."""

    def test_threshold_request_uses_dma(self):
        """Should take the DMA path at exactly the threshold."""
        m = make_machine(cores=2, warm_start=True)
        run(m, [make_request(0, args_len=4096)])

        assert m.paths[0] == Path.DMA
        assert m.status[0] == RequestStatus.COMPLETED
        assert m.ledgers[0].step_ns("dma_write") == CostModel().dma_write

    def test_below_threshold_uses_lines(self):
        """Should keep one byte below the threshold on the line protocol."""
        m = make_machine(cores=2, warm_start=True)
        run(m, [make_request(0, args_len=4095)])

        assert m.paths[0] == Path.FASTPATH
        assert m.ledgers[0].step_ns("dma_write") == 0
        assert m.status[0] == RequestStatus.COMPLETED

    def test_auxiliary_lines_cost_a_second_round_trip(self):
        """Should charge two line round trips when arguments spill over."""
        m = make_machine(warm_start=True)
        run(m, [make_request(0, args_len=111), make_request(1, args_len=110, at=MS)])

        roundtrip = CostModel().coherent_line_roundtrip
        assert m.ledgers[0].step_ns("line_delivery") == 2 * roundtrip
        assert m.ledgers[1].step_ns("line_delivery") == roundtrip


class TestDrops:
    """Tests for dropped requests."""

    def test_unknown_flow(self):
        """Should drop a packet for a port with no service and keep conservation."""
        m = make_machine()
        requests = [make_request(0, port=9)]
        sim, end = run(m, requests)

        assert m.status[0] == RequestStatus.DROPPED
        assert m.counters["drop_unknown_flow"] == 1
        metrics = collect_metrics(ExperimentConfig(), m, sim.admitted, end)
        assert metrics.dropped == 1
        assert metrics.row("dropped").drops == 1

    def test_kernel_queue_limit(self):
        """Should drop once the software queue is full."""
        config = NicConfig(endpoints_per_service=1, rebalance=False, kernel_queue_limit=1)
        m = make_machine(services=3, nic_config=config)
        run(m, [make_request(i, service=i) for i in range(3)])

        assert m.counters["drop_queue_full"] == 1
        assert m.status[2] == RequestStatus.DROPPED
        assert m.status[0] == RequestStatus.COMPLETED
        assert m.status[1] == RequestStatus.COMPLETED


class TestSchedMirror:
    """Tests for the NIC's scheduler mirror."""

    def test_update_lands_one_round_trip_later(self):
        """Should queue the update and apply it only when MIRROR fires."""
        m = make_machine()
        nic.mirror_update(m, 0, Ring.USER, 0, 1)

        assert m.mirror.entries[0].ring == Ring.NONE
        assert m.take_outbox()[0][0] == CostModel().coherent_line_roundtrip
        nic.apply_mirror(m, 0)
        assert m.mirror.entries[0] == nic.MirrorEntry(Ring.USER, 0, 1)
        assert m.mirror.cores_of(0) == [0]

    def test_freeze_and_load(self):
        """Should restore entries and queued updates from a snapshot."""
        mirror = nic.SchedMirror(2)
        mirror.queues[1].append(nic.MirrorEntry(Ring.KERNEL, -1, -1))
        frozen = mirror.freeze()

        other = nic.SchedMirror(2)
        other.load(frozen)

        assert other.freeze() == frozen
        assert other.idle_cores() == [0, 1]

    def test_leaving_core_requeues_backlog(self):
        """Should move a detached endpoint's queue to the kernel queue."""
        m = make_machine(warm_start=True)
        m.boot()
        m.admit(make_request(0))
        m.set_path(0, Path.FASTPATH)
        endpoint = m.endpoints[m.services[0].endpoints[0]]
        endpoint.queue.append(0)

        scheduler.kernel_entry(m, 0, "yield")
        m.take_outbox()
        nic.apply_mirror(m, 0)

        assert endpoint.attached_core == -1
        assert list(m.kernel_queue) == [0]
        assert m.paths[0] == Path.QUEUED
        assert m.counters["requeue"] == 1


class TestServiceStats:
    """Tests for ServiceLoadStats class."""

    def test_depth(self):
        """Should count arrivals neither dispatched nor dropped."""
        stats = nic.ServiceLoadStats([0], window_ns=100)
        for t in range(5):
            stats.arrival(0, t)
        stats.dispatched(0)
        stats.dropped(0)

        assert stats.depth(0) == 3

    def test_prune_window(self):
        """Should forget arrivals older than the window."""
        stats = nic.ServiceLoadStats([0], window_ns=100)
        stats.arrival(0, 0)
        stats.arrival(0, 150)
        stats.prune(200)

        assert stats.quiet_arrivals(0) == 1
        assert stats.window_arrivals(0, 200) == 1

    def test_arrival_prunes(self):
        """Should drop stale arrival times without an explicit prune."""
        stats = nic.ServiceLoadStats([0], window_ns=100)
        for t in range(0, 10_000, 10):
            stats.arrival(0, t)

        assert stats.quiet_arrivals(0) == 11
        assert stats.arrivals[0] == 1000

    def test_window_inside_idle_span(self):
        """Should count the rate over one window and quietness over the whole span."""
        stats = nic.ServiceLoadStats([0], window_ns=100, idle_windows=3)
        for t in (0, 150, 250):
            stats.arrival(0, t)

        assert stats.window_arrivals(0, 250) == 2
        assert stats.quiet_arrivals(0) == 3


class TestSuggestRebalance:
    """Tests for suggest_rebalance function."""

    def test_quiet_machine(self):
        """Should suggest nothing before any arrival."""
        assert nic.suggest_rebalance(make_machine(cores=2, services=2)) is None

    def test_grow_from_donor(self):
        """Should take a core from an idle service for a deep one."""
        m = make_machine(cores=2, services=2)
        m.stats.arrivals[0] = 20
        m.mirror.entries[0] = nic.MirrorEntry(Ring.KERNEL, -1, -1)
        m.mirror.entries[1] = nic.MirrorEntry(Ring.USER, 1, m.services[1].endpoints[0])

        assert nic.suggest_rebalance(m) == RebalanceRequest(0, 1, 1)

    def test_grow_from_idle_core(self):
        """Should rejoin a retired core when no service can donate."""
        m = make_machine(cores=2, services=2)
        m.stats.arrivals[0] = 20

        assert nic.suggest_rebalance(m) == RebalanceRequest(0, 1, -1)

    def test_nothing_to_give(self):
        """Should suggest nothing when every core is a busy dispatcher."""
        m = make_machine(cores=2, services=2)
        m.stats.arrivals[0] = 20
        m.mirror.entries = [nic.MirrorEntry(Ring.KERNEL, -1, -1)] * 2

        assert nic.suggest_rebalance(m) is None

    def test_kernel_queue_backlog_grows(self):
        """Should ask for a core when the kernel queue is past the high watermark."""
        m = make_machine(cores=2, services=2)
        m.stats.arrivals[0] = 5
        m.kernel_queue.extend(range(17))

        assert nic.suggest_rebalance(m) == RebalanceRequest(0, 1, -1)

    def test_backlog_at_watermark_waits(self):
        """Should leave a kernel queue at the high watermark alone."""
        m = make_machine(cores=2, services=2)
        m.stats.arrivals[0] = 5
        m.kernel_queue.extend(range(16))

        assert nic.suggest_rebalance(m) is None

    def test_shrink_idle_service(self):
        """Should take a core back from a service quiet for the whole idle span."""
        m = make_machine(cores=3, services=2)
        m.stats.arrival(0, 0)
        m.stats.dispatched(0)
        endpoint = m.services[0].endpoints[0]
        m.mirror.entries[0] = nic.MirrorEntry(Ring.USER, 0, endpoint)
        m.mirror.entries[1] = nic.MirrorEntry(Ring.USER, 0, endpoint)
        m.now = 2 * MS

        assert nic.suggest_rebalance(m) == RebalanceRequest(0, -1)

    def test_recent_arrival_keeps_cores(self):
        """Should not shrink a service that saw traffic within the idle span."""
        m = make_machine(cores=3, services=2)
        m.stats.arrival(0, 0)
        m.stats.dispatched(0)
        endpoint = m.services[0].endpoints[0]
        m.mirror.entries[0] = nic.MirrorEntry(Ring.USER, 0, endpoint)
        m.mirror.entries[1] = nic.MirrorEntry(Ring.USER, 0, endpoint)
        m.now = MS // 2

        assert nic.suggest_rebalance(m) is None

    def test_single_core_service_is_kept(self):
        """Should leave an idle service its last core."""
        m = make_machine(cores=2, services=2)
        m.stats.arrival(0, 0)
        m.stats.dispatched(0)
        m.mirror.entries[0] = nic.MirrorEntry(Ring.USER, 0, m.services[0].endpoints[0])
        m.now = 2 * MS

        assert nic.suggest_rebalance(m) is None


class TestPreemptNotice:
    """Tests for on_preempt_notice function."""

    def test_releases_stalled_user_core(self):
        """Should answer the user core's load with TRY_AGAIN."""
        m = make_machine(warm_start=True)
        m.boot()

        nic.on_preempt_notice(m, 0)

        assert m.counters["try_again"] == 1
        assert m.cores[0].ring == Ring.KERNEL

    def test_ignores_kernel_core(self):
        """Should leave a kernel dispatcher alone."""
        m = make_machine()
        m.boot()

        nic.on_preempt_notice(m, 0)

        assert m.counters["try_again"] == 0
