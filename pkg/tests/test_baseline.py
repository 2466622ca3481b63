"""Tests for baseline.py module.

Tests the descriptor ring, the interrupt and kernel-bypass receive paths,
ring overflow and the ordering of the three NIC designs.
"""

import numpy as np

from rpcline.baseline import BaselineMachine, DescriptorRing, ring_for
from rpcline.machine import Machine
from rpcline.models import (
    BaselineConfig,
    CostModel,
    FlowKey,
    NicConfig,
    RequestStatus,
    RpcRequest,
    SchedulerConfig,
    Service,
)
from rpcline.nic import service_port
from rpcline.simulate import Simulator
from rpcline.workload import CLIENT_ADDR_BASE, SERVER_ADDR

MS = 1_000_000


def make_request(request_id, service=0, at=0, cycles=2000):
    flow = FlowKey(CLIENT_ADDR_BASE, 1024 + request_id, SERVER_ADDR, service_port(service))
    return RpcRequest(request_id, flow, service, 0, 64, at, cycles)


def run(requests, bypass=False, cost=None, ring_depth=256, cores=1):
    m = BaselineMachine(
        cost or CostModel(),
        BaselineConfig(ring_depth=ring_depth),
        cores,
        [Service(0)],
        bypass=bypass,
        record_trace=True,
    )
    sim = Simulator(m, 100 * MS)
    sim.feed(requests)
    end = sim.run()
    return m, end


class TestDescriptorRing:
    """Tests for DescriptorRing class."""

    def test_post_until_full(self):
        """Should accept exactly ``depth`` descriptors."""
        ring = DescriptorRing(depth=2, core=0)

        assert ring.post(1)
        assert ring.post(2)
        assert ring.full
        assert not ring.post(3)
        assert len(ring) == 2

    def test_take_waits_for_dma(self):
        """Should hand out a descriptor only after the NIC marked it ready."""
        ring = DescriptorRing(depth=4, core=0)
        ring.post(7)

        assert ring.take() == -1
        ring.mark_ready(7)
        assert ring.take() == 7
        assert ring.head == ring.tail == 1

    def test_take_in_order(self):
        """Should not skip a head descriptor that is still being written."""
        ring = DescriptorRing(depth=4, core=0)
        ring.post(1)
        ring.post(2)
        ring.mark_ready(2)

        assert ring.take() == -1


class TestRingFor:
    """Tests for ring_for function."""

    def test_in_range_and_stable(self):
        """Should map a flow to the same ring every time."""
        flow = FlowKey(CLIENT_ADDR_BASE + 5, 4000, SERVER_ADDR, 10_000)

        assert 0 <= ring_for(flow, 8) < 8
        assert ring_for(flow, 8) == ring_for(flow, 8)


class TestInterruptPath:
    """Tests for the interrupt-driven receive path."""

    def test_first_request_pays_every_step(self):
        """Should charge DMA, interrupt and the kernel steps including a switch."""
        cost = CostModel()
        m, _ = run([make_request(0)])

        ledger = m.ledgers[0]
        lead = cost.nic_pipeline + cost.dma_write + cost.descriptor_fetch
        assert ledger.dispatch_overhead == lead + cost.interrupt_delivery + cost.kernel_steps(64)
        assert ledger.latency == (
            ledger.dispatch_overhead + cost.cycles_to_ns(2000)
            + cost.descriptor_fetch + cost.dma_write
        )
        assert m.status[0] == RequestStatus.COMPLETED

    def test_same_process_skips_switch(self):
        """Should not switch context for a second request of the same service."""
        m, _ = run([make_request(0), make_request(1, at=MS)])

        assert m.ledgers[0].step_ns("context_switch") == CostModel().context_switch
        assert m.ledgers[1].step_ns("context_switch") == 0

    def test_no_spin(self):
        """Should report no polling cycles."""
        m, end = run([make_request(0)])
        assert m.spin_ns(end) == 0


class TestBypassPath:
    """Tests for the kernel-bypass polling path."""

    def test_skips_interrupt_and_kernel(self):
        """Should reach the handler with software dispatch only."""
        cost = CostModel()
        m, _ = run([make_request(0)], bypass=True)

        ledger = m.ledgers[0]
        assert ledger.step_ns("interrupt") == 0
        assert ledger.dispatch_overhead == (
            cost.nic_pipeline + cost.dma_write + cost.descriptor_fetch
            + cost.software_dispatch(64)
        )

    def test_polling_cores_spin(self):
        """Should count idle polling time."""
        m, end = run([make_request(0)], bypass=True, cores=2)
        assert m.spin_ns(end) > end


class TestDrops:
    """Tests for ring overflow and unknown services."""

    def test_ring_full(self):
        """Should drop arrivals while the ring is full."""
        m, _ = run([make_request(i) for i in range(3)], ring_depth=1)

        assert m.counters["drop_ring_full"] == 2
        assert m.status[0] == RequestStatus.COMPLETED
        assert m.status[1] == m.status[2] == RequestStatus.DROPPED

    def test_unknown_service(self):
        """Should drop a request for a service the machine does not run."""
        m, _ = run([make_request(0, service=3)])

        assert m.counters["drop_unknown_flow"] == 1
        assert m.outstanding == 0


def random_cost_model(rng: np.random.Generator) -> CostModel:
    """Any valid cost model: the line round trip stays below DMA plus descriptor fetch."""
    dma = int(rng.integers(1, 5000))
    descriptor = int(rng.integers(1, 5000))

    def draw() -> int:
        return int(rng.integers(0, 2000))

    return CostModel(
        coherent_line_roundtrip=int(rng.integers(0, dma + descriptor)),
        dma_write=dma,
        descriptor_fetch=descriptor,
        interrupt_delivery=int(rng.integers(1, 5000)),
        kernel_proto_processing=draw(),
        process_lookup=draw(),
        core_selection=draw(),
        schedule_cost=draw(),
        context_switch=draw(),
        unmarshal_fixed=draw(),
        unmarshal_per_byte=int(rng.integers(0, 4)),
        fn_lookup=draw(),
        jump_cost=draw(),
        nic_pipeline=draw(),
    )


class TestOrdering:
    """Round-trip ordering of the three designs."""

    def test_coherent_beats_bypass_beats_interrupt(self):
        """Should order round trips coherent < bypass < interrupt for any valid model."""
        rng = np.random.Generator(np.random.PCG64(3))
        for _ in range(100):
            cost = random_cost_model(rng)
            coherent = Machine(cost, NicConfig(rebalance=False), SchedulerConfig(warm_start=True),
                               1, [Service(0)])
            sim = Simulator(coherent, 100 * MS)
            sim.feed([make_request(0)])
            sim.run()

            bypass, _ = run([make_request(0)], bypass=True, cost=cost)
            interrupt, _ = run([make_request(0)], cost=cost)

            assert coherent.ledgers[0].latency < bypass.ledgers[0].latency
            assert bypass.ledgers[0].latency < interrupt.ledgers[0].latency
