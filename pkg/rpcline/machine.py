"""The coherent NIC machine: one transition function for every driver.

The simulator, the model checker and trace replay all mutate a ``Machine``
by calling :meth:`Machine.fire`. Handlers never look at a clock of their own;
they read ``now`` and append ``(delay, event)`` pairs to ``outbox``, and the
driver decides when those events happen. An untimed machine (``timed=False``)
keeps ``now`` at 0 and skips deadline and period bookkeeping, which is what
the checker explores.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import replace
from typing import Callable, Sequence

from . import nic, protocol, scheduler
from .events import Event, EventKind
from .metrics import RequestLedger
from .models import (
    CoreMode,
    CoreState,
    CostModel,
    DispatchRecord,
    Endpoint,
    LineState,
    NicConfig,
    Path,
    PendingLoad,
    RequestStatus,
    Ring,
    RpcRequest,
    SchedulerConfig,
    Service,
    TraceRecord,
)

logger = logging.getLogger(__name__)

Handler = Callable[["Machine", Event], None]


class Machine:
    """Ground truth for cores, lines, endpoints and NIC state.

    Args:
        cost: Step latencies
        nic_config: Endpoint shape, watermarks, seeded bugs
        sched_config: OS scheduler policy
        core_count: Number of cores, each with its own kernel endpoint
        services: Services to install; their endpoints are allocated here
        timed: Track deadlines and periods (False for exhaustive exploration)
        strict: Raise on a duplicate response instead of only counting it
        codec: Encode and decode real dispatch record images
        keep_ledgers: Record per-request ledgers
        record_trace: Keep a TraceRecord list
    """

    def __init__(
        self,
        cost: CostModel,
        nic_config: NicConfig,
        sched_config: SchedulerConfig,
        core_count: int,
        services: Sequence[Service],
        *,
        timed: bool = True,
        strict: bool = True,
        codec: bool = True,
        keep_ledgers: bool = True,
        record_trace: bool = False,
    ) -> None:
        if core_count < 1:
            raise ValueError("core_count must be >= 1")
        self.cost = cost
        self.nic_config = nic_config
        self.sched = sched_config
        self.timed = timed
        self.strict = strict
        self.codec = codec
        self.now = 0
        self.outbox: list[tuple[int, Event]] = []

        self.aux_per_endpoint = (
            nic_config.aux_lines if nic_config.aux_lines is not None
            else cost.default_aux_lines()
        )
        self.lines: dict[int, LineState] = {}
        self.endpoints: list[Endpoint] = []
        self._next_line = 0

        self.cores = [CoreState(core_id=c) for c in range(core_count)]
        self.kernel_endpoint = [self._allocate(-1, "kernel").endpoint_id for _ in self.cores]
        self.services: dict[int, Service] = {}
        for service in services:
            endpoints = tuple(
                self._allocate(service.service_id, "user").endpoint_id
                for _ in range(nic_config.endpoints_per_service)
            )
            self.services[service.service_id] = replace(service, endpoints=endpoints)

        self.demux = nic.DemuxTable()
        for service_id in self.services:
            self.demux.install(service_id, nic.service_port(service_id))
        self.mirror = nic.SchedMirror(core_count)
        self.stats = nic.ServiceLoadStats(
            list(self.services), nic_config.window_ns, nic_config.idle_windows
        )
        self.kernel_queue: deque[int] = deque()

        self.requests: dict[int, RpcRequest] = {}
        self.status: dict[int, RequestStatus] = {}
        self.responses: Counter[int] = Counter()
        self.paths: dict[int, Path] = {}
        self.reserved: dict[int, int] = {}
        self.records: dict[int, DispatchRecord] = {}
        self.ledgers: dict[int, RequestLedger] | None = {} if keep_ledgers else None
        self.trace: list[TraceRecord] | None = [] if record_trace else None
        self.counters: Counter[str] = Counter()
        self.outstanding = 0
        self.tick_armed = False
        self.on_complete: Callable[[RpcRequest], None] | None = None

    def _allocate(self, owner: int, mode: str) -> Endpoint:
        base = self._next_line
        aux = self.aux_per_endpoint
        control = (base, base + 1)
        aux_lines = tuple(range(base + 2, base + 2 + aux))
        self._next_line = base + 2 + aux
        endpoint = Endpoint(
            endpoint_id=len(self.endpoints),
            owner_process=owner,
            mode=mode,
            control_lines=control,
            aux_lines=aux_lines,
        )
        self.endpoints.append(endpoint)
        for line_id in control:
            self.lines[line_id] = LineState(line_id=line_id, endpoint_id=endpoint.endpoint_id)
        return endpoint

    # -- driver interface -------------------------------------------------

    def boot(self) -> None:
        """Put every core in the kernel dispatch loop, stalled on its kernel line.

        With ``warm_start`` the first cores start in the user loops of the
        services instead, one core per service in service id order.
        """
        warm = sorted(self.services) if self.sched.warm_start else []
        for core in self.cores:
            if core.core_id < len(warm):
                self._warm(core, self.services[warm[core.core_id]])
                continue
            core.ring = Ring.KERNEL
            core.mode = CoreMode.KERNEL_LOOP
            self.mirror.entries[core.core_id] = nic.MirrorEntry(Ring.KERNEL, -1, -1)
            protocol.core_load(self, core.core_id, self.kernel_line(core.core_id))
        nic.arm_tick(self)

    def _warm(self, core: CoreState, service: Service) -> None:
        endpoint = self.endpoints[service.endpoints[0]]
        endpoint.attached_core = core.core_id
        core.ring = Ring.USER
        core.mode = CoreMode.USER_LOOP
        core.process = service.service_id
        core.endpoint = endpoint.endpoint_id
        core.last_process = service.service_id
        self.mirror.entries[core.core_id] = nic.MirrorEntry(
            Ring.USER, service.service_id, endpoint.endpoint_id
        )
        protocol.core_load(self, core.core_id, endpoint.active_line)

    def admit(self, request: RpcRequest) -> None:
        """Register a request before its ARRIVAL event fires."""
        if request.request_id in self.requests:
            raise ValueError(f"duplicate request id {request.request_id}")
        self.requests[request.request_id] = request
        self.status[request.request_id] = RequestStatus.PENDING

    def arrival_event(self, request_id: int) -> Event:
        return Event(EventKind.ARRIVAL, request=request_id)

    def fire(self, event: Event) -> None:
        _HANDLERS[event.kind](self, event)

    def emit(self, delay: int, event: Event) -> None:
        self.outbox.append((delay if self.timed else 0, event))

    def take_outbox(self) -> list[tuple[int, Event]]:
        out, self.outbox = self.outbox, []
        return out

    # -- helpers shared by the protocol, NIC and scheduler modules ---------

    def record(self, kind: str, core: int = -1, line: int = -1, request: int = -1) -> None:
        if self.trace is not None:
            self.trace.append(TraceRecord(self.now, kind, core, line, request))

    def kernel_line(self, core_id: int) -> int:
        return self.endpoints[self.kernel_endpoint[core_id]].active_line

    def endpoint_of(self, line_id: int) -> Endpoint:
        return self.endpoints[self.lines[line_id].endpoint_id]

    def ledger(self, request_id: int) -> RequestLedger | None:
        if self.ledgers is None:
            return None
        return self.ledgers.get(request_id)

    def charge(self, request_id: int, step: str, ns: int, cpu: bool = True) -> None:
        ledger = self.ledger(request_id)
        if ledger is not None:
            ledger.charge(step, ns, cpu)

    def set_path(self, request_id: int, path: Path) -> None:
        self.paths[request_id] = path
        ledger = self.ledger(request_id)
        if ledger is not None:
            ledger.path = path

    def transmit(self, request_id: int, core_id: int) -> None:
        """The NIC puts a response on the wire."""
        self.responses[request_id] += 1
        self.record("transmit", core_id, -1, request_id)
        if self.responses[request_id] > 1:
            self.counters["duplicate_response"] += 1
            if self.strict:
                raise protocol.ProtocolViolation(
                    f"request {request_id} transmitted twice", core=core_id, prop="single_response"
                )
            return
        self.status[request_id] = RequestStatus.COMPLETED
        self.outstanding -= 1
        ledger = self.ledger(request_id)
        if ledger is not None:
            ledger.wire = self.now
        if self.on_complete is not None:
            self.on_complete(self.requests[request_id])

    def drop(self, request_id: int, reason: str) -> None:
        logger.debug("dropping request %d: %s", request_id, reason)
        self.status[request_id] = RequestStatus.DROPPED
        self.set_path(request_id, Path.DROPPED)
        self.outstanding -= 1
        self.counters["drop"] += 1
        self.counters[f"drop_{reason}"] += 1
        self.record("drop", -1, -1, request_id)
        service = self.requests[request_id].service_id
        if reason != "unknown_flow" and service in self.services:
            self.stats.dropped(service)

    def active(self) -> bool:
        return self.outstanding > 0

    def mirror_consistent(self) -> list[int]:
        """Cores whose settled mirror entry disagrees with ground truth."""
        stale = []
        for core in self.cores:
            if self.mirror.queues[core.core_id]:
                continue
            truth = nic.MirrorEntry(core.ring, core.process, core.endpoint)
            if self.mirror.entries[core.core_id] != truth:
                stale.append(core.core_id)
        return stale

    def verify(self) -> None:
        """Raise if a settled mirror entry diverged from the cores."""
        stale = self.mirror_consistent()
        if stale:
            raise protocol.ProtocolViolation(
                f"scheduler mirror diverged for cores {stale}", core=stale[0], prop="mirror"
            )

    def spin_ns(self, end: int) -> int:
        return 0

    # -- state snapshots ---------------------------------------------------

    def freeze(self) -> tuple:
        """Hashable snapshot of everything that influences future behavior."""
        cores = tuple(
            (c.mode, c.ring, c.process, c.endpoint, c.line, c.request, c.pending_ipi,
             c.yield_requested, tuple(sorted(c.exclusive)), tuple(sorted(c.fetching)))
            for c in self.cores
        )
        lines = tuple(
            (l.holder, l.holder_core, l.pending.core if l.pending else -1,
             l.content, l.content_request)
            for l in self.lines.values()
        )
        endpoints = tuple((e.active_index, e.attached_core, tuple(e.queue)) for e in self.endpoints)
        requests = tuple((self.status[r], self.responses[r]) for r in sorted(self.requests))
        return (
            cores,
            lines,
            endpoints,
            tuple(self.kernel_queue),
            self.mirror.freeze(),
            tuple(sorted(self.reserved.items())),
            requests,
        )

    def load_state(self, frozen: tuple) -> None:
        """Overwrite mutable state with a snapshot taken by :meth:`freeze`."""
        cores, lines, endpoints, kernel_queue, mirror, reserved, requests = frozen
        for core, values in zip(self.cores, cores):
            (core.mode, core.ring, core.process, core.endpoint, core.line, core.request,
             core.pending_ipi, core.yield_requested, exclusive, fetching) = values
            core.exclusive = frozenset(exclusive)
            core.fetching = frozenset(fetching)
        for line, values in zip(self.lines.values(), lines):
            line.holder, line.holder_core, pending, line.content, line.content_request = values
            line.pending = PendingLoad(pending, self.now, self.now) if pending >= 0 else None
        for endpoint, (active, attached, queue) in zip(self.endpoints, endpoints):
            endpoint.active_index = active
            endpoint.attached_core = attached
            endpoint.queue = deque(queue)
        self.kernel_queue = deque(kernel_queue)
        self.mirror.load(mirror)
        self.reserved = dict(reserved)
        self.outstanding = 0
        for request_id, (status, responses) in zip(sorted(self.requests), requests):
            self.status[request_id] = status
            self.responses[request_id] = responses
            if status in (RequestStatus.IN_NIC, RequestStatus.DELIVERED):
                self.outstanding += 1


def _arrival(m: Machine, e: Event) -> None:
    nic.on_arrival(m, e.request)


def _decoded(m: Machine, e: Event) -> None:
    nic.on_decoded(m, e.request)


def _deliver(m: Machine, e: Event) -> None:
    scheduler.on_deliver(m, e.core, e.line, e.request, e.arg)


def _handler_done(m: Machine, e: Event) -> None:
    scheduler.on_handler_done(m, e.core, e.request)


def _switch_done(m: Machine, e: Event) -> None:
    scheduler.on_switch_done(m, e.core, e.arg, e.request, e.line)


def _fetch_done(m: Machine, e: Event) -> None:
    protocol.finish_fetch(m, e.core, e.line, e.request)


def _timeout(m: Machine, e: Event) -> None:
    protocol.on_timeout(m, e.core, e.line)


def _mirror(m: Machine, e: Event) -> None:
    nic.apply_mirror(m, e.core)


def _nic_preempt(m: Machine, e: Event) -> None:
    nic.on_preempt_notice(m, e.core)


def _reload(m: Machine, e: Event) -> None:
    scheduler.reload(m, e.core)


def _preempt(m: Machine, e: Event) -> None:
    scheduler.preempt(m, e.core)


def _retire(m: Machine, e: Event) -> None:
    protocol.retire_thread(m, e.core)


def _rejoin(m: Machine, e: Event) -> None:
    scheduler.rejoin(m, e.core)


def _rebalance(m: Machine, e: Event) -> None:
    nic.on_tick(m)


_HANDLERS: dict[EventKind, Handler] = {
    EventKind.ARRIVAL: _arrival,
    EventKind.DECODED: _decoded,
    EventKind.DELIVER: _deliver,
    EventKind.HANDLER_DONE: _handler_done,
    EventKind.SWITCH_DONE: _switch_done,
    EventKind.FETCH_DONE: _fetch_done,
    EventKind.TIMEOUT: _timeout,
    EventKind.MIRROR: _mirror,
    EventKind.NIC_PREEMPT: _nic_preempt,
    EventKind.RELOAD: _reload,
    EventKind.PREEMPT: _preempt,
    EventKind.RETIRE: _retire,
    EventKind.REJOIN: _rejoin,
    EventKind.REBALANCE: _rebalance,
}
