"""Traditional NIC: descriptor rings, DMA and software receive path.

One receive ring per core, chosen by flow hash. The NIC DMAs the payload and
updates the descriptor; the core then either takes an interrupt and runs
receive steps 5-12 in the kernel (``interrupt`` variant) or finds the
descriptor while busy polling and runs only steps 10-12 (``bypass`` variant).
The response goes out through a transmit descriptor and a DMA read.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, NamedTuple, Sequence

from .metrics import RequestLedger
from .models import (
    BaselineConfig,
    CostModel,
    FlowKey,
    Path,
    RequestStatus,
    RpcRequest,
    Service,
    TraceRecord,
)

logger = logging.getLogger(__name__)


class RingEventKind(IntEnum):
    ARRIVAL = 0
    RX_READY = 1
    HANDLER_DONE = 2
    TX_DONE = 3


class RingEvent(NamedTuple):
    kind: RingEventKind
    core: int = -1
    request: int = -1


@dataclass
class DescriptorRing:
    """Receive descriptor ring between ``head`` (next to consume) and ``tail``."""
    depth: int
    core: int
    head: int = 0
    tail: int = 0
    slots: deque[list[int]] = field(default_factory=deque)  # [request_id, ready]

    @property
    def full(self) -> bool:
        return self.tail - self.head >= self.depth

    def __len__(self) -> int:
        return self.tail - self.head

    def post(self, request_id: int) -> bool:
        if self.full:
            return False
        self.slots.append([request_id, 0])
        self.tail += 1
        return True

    def mark_ready(self, request_id: int) -> None:
        for slot in self.slots:
            if slot[0] == request_id:
                slot[1] = 1
                return
        raise KeyError(request_id)

    def take(self) -> int:
        """Consume the head descriptor if the NIC finished writing it."""
        if not self.slots or not self.slots[0][1]:
            return -1
        self.head += 1
        return self.slots.popleft()[0]


def ring_for(flow: FlowKey, rings: int) -> int:
    """RSS-style flow hash."""
    h = (flow.src_addr * 0x9E3779B1 ^ flow.src_port * 0x85EBCA77
         ^ flow.dst_addr * 0xC2B2AE3D ^ flow.dst_port) & 0xFFFFFFFF
    return h % rings


@dataclass
class _Core:
    core_id: int
    busy: bool = False
    last_process: int = -1
    busy_ns: int = 0


class BaselineMachine:
    """Descriptor-ring NIC plus cores, driven by the same simulator loop as ``Machine``."""

    def __init__(
        self,
        cost: CostModel,
        config: BaselineConfig,
        core_count: int,
        services: Sequence[Service],
        *,
        bypass: bool = False,
        keep_ledgers: bool = True,
        record_trace: bool = False,
    ) -> None:
        self.cost = cost
        self.config = config
        self.bypass = bypass
        self.path = Path.BASELINE_BYPASS if bypass else Path.BASELINE_INTERRUPT
        self.services = {s.service_id: s for s in services}
        self.rings = [DescriptorRing(config.ring_depth, c) for c in range(core_count)]
        self.cores = [_Core(c) for c in range(core_count)]
        self.now = 0
        self.outbox: list[tuple[int, RingEvent]] = []
        self.requests: dict[int, RpcRequest] = {}
        self.status: dict[int, RequestStatus] = {}
        self.ledgers: dict[int, RequestLedger] | None = {} if keep_ledgers else None
        self.trace: list[TraceRecord] | None = [] if record_trace else None
        self.counters: Counter[str] = Counter()
        self.outstanding = 0
        self.on_complete: Callable[[RpcRequest], None] | None = None

    # -- driver interface --------------------------------------------------

    def boot(self) -> None:
        pass

    def admit(self, request: RpcRequest) -> None:
        if request.request_id in self.requests:
            raise ValueError(f"duplicate request id {request.request_id}")
        self.requests[request.request_id] = request
        self.status[request.request_id] = RequestStatus.PENDING

    def arrival_event(self, request_id: int) -> RingEvent:
        return RingEvent(RingEventKind.ARRIVAL, request=request_id)

    def fire(self, event: RingEvent) -> None:
        if event.kind == RingEventKind.ARRIVAL:
            self._arrival(event.request)
        elif event.kind == RingEventKind.RX_READY:
            self._rx_ready(event.core, event.request)
        elif event.kind == RingEventKind.HANDLER_DONE:
            self._handler_done(event.core, event.request)
        else:
            self._tx_done(event.core, event.request)

    def take_outbox(self) -> list[tuple[int, RingEvent]]:
        out, self.outbox = self.outbox, []
        return out

    def active(self) -> bool:
        return self.outstanding > 0

    def verify(self) -> None:
        for ring in self.rings:
            if not 0 <= len(ring) <= ring.depth:
                raise AssertionError(f"ring {ring.core} out of bounds")

    def spin_ns(self, end: int) -> int:
        """Idle time of the polling cores (bypass only)."""
        if not self.bypass:
            return 0
        return sum(max(0, end - core.busy_ns) for core in self.cores)

    # -- internals ----------------------------------------------------------

    def _emit(self, delay: int, event: RingEvent) -> None:
        self.outbox.append((delay, event))

    def _record(self, kind: str, core: int = -1, request: int = -1) -> None:
        if self.trace is not None:
            self.trace.append(TraceRecord(self.now, kind, core, -1, request))

    def _charge(self, request_id: int, step: str, ns: int, cpu: bool = True) -> None:
        if self.ledgers is not None:
            self.ledgers[request_id].charge(step, ns, cpu)

    def _arrival(self, request_id: int) -> None:
        request = self.requests[request_id]
        self.status[request_id] = RequestStatus.IN_NIC
        self.outstanding += 1
        if self.ledgers is not None:
            self.ledgers[request_id] = RequestLedger(request_id, request.service_id, self.path, self.now)
        self._record("arrival", -1, request_id)

        ring = self.rings[ring_for(request.flow_key, len(self.rings))]
        if request.service_id not in self.services or not ring.post(request_id):
            reason = "ring_full" if request.service_id in self.services else "unknown_flow"
            self.status[request_id] = RequestStatus.DROPPED
            self.outstanding -= 1
            self.counters["drop"] += 1
            self.counters[f"drop_{reason}"] += 1
            if self.ledgers is not None:
                self.ledgers[request_id].path = Path.DROPPED
            self._record("drop", ring.core, request_id)
            return

        cost = self.cost
        self._charge(request_id, "nic_pipeline", cost.nic_pipeline, cpu=False)
        self._charge(request_id, "dma_write", cost.dma_write, cpu=False)
        self._charge(request_id, "descriptor_fetch", cost.descriptor_fetch, cpu=False)
        self._emit(cost.nic_pipeline + cost.dma_write + cost.descriptor_fetch,
                   RingEvent(RingEventKind.RX_READY, ring.core, request_id))

    def _rx_ready(self, core_id: int, request_id: int) -> None:
        self.rings[core_id].mark_ready(request_id)
        self._record("rx_ready", core_id, request_id)
        if not self.cores[core_id].busy:
            self._software_rx(core_id)

    def _software_rx(self, core_id: int) -> None:
        """Steps 4-12 (interrupt) or 10-12 (bypass) for the next ready descriptor."""
        request_id = self.rings[core_id].take()
        if request_id < 0:
            return
        core = self.cores[core_id]
        request = self.requests[request_id]
        cost = self.cost
        self.status[request_id] = RequestStatus.DELIVERED
        lead = 0

        if not self.bypass:
            self._charge(request_id, "interrupt", cost.interrupt_delivery)
            self._charge(request_id, "kernel_proto_processing", cost.kernel_proto_processing)
            self._charge(request_id, "process_lookup", cost.process_lookup)
            self._charge(request_id, "core_selection", cost.core_selection)
            self._charge(request_id, "schedule", cost.schedule_cost)
            switch = core.last_process != request.service_id
            if switch:
                self._charge(request_id, "context_switch", cost.context_switch)
                self.counters["context_switch"] += 1
            self.counters["interrupt"] += 1
            self._record("interrupt", core_id, request_id)
            lead = cost.interrupt_delivery + cost.kernel_steps(request.args_len, switch)
        else:
            self._record("poll", core_id, request_id)
            lead = cost.software_dispatch(request.args_len)
        self._charge(request_id, "unmarshal", cost.unmarshal(request.args_len))
        self._charge(request_id, "fn_lookup", cost.fn_lookup)
        self._charge(request_id, "jump", cost.jump_cost)

        handler_ns = cost.cycles_to_ns(request.handler_cycles)
        self._charge(request_id, "handler", handler_ns)
        if self.ledgers is not None:
            self.ledgers[request_id].handler_start = self.now + lead
        core.busy = True
        core.last_process = request.service_id
        core.busy_ns += lead + handler_ns
        self._emit(lead + handler_ns, RingEvent(RingEventKind.HANDLER_DONE, core_id, request_id))

    def _handler_done(self, core_id: int, request_id: int) -> None:
        cost = self.cost
        self._charge(request_id, "tx_descriptor", cost.descriptor_fetch, cpu=False)
        self._charge(request_id, "tx_dma", cost.dma_write, cpu=False)
        self._emit(cost.descriptor_fetch + cost.dma_write,
                   RingEvent(RingEventKind.TX_DONE, core_id, request_id))
        self.cores[core_id].busy = False
        self._software_rx(core_id)

    def _tx_done(self, core_id: int, request_id: int) -> None:
        self.status[request_id] = RequestStatus.COMPLETED
        self.outstanding -= 1
        self._record("transmit", core_id, request_id)
        if self.ledgers is not None:
            self.ledgers[request_id].wire = self.now
        if self.on_complete is not None:
            self.on_complete(self.requests[request_id])
