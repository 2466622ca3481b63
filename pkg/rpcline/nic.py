"""NIC datapath: demultiplexing, dispatch decisions, scheduler mirror and load statistics.

The NIC sees the OS only through ``SchedMirror``, a copy of per-core scheduling
state kept up to date by ordered updates that take one line round trip to
arrive. Dispatch decisions use the mirror and the line state the NIC homes;
they never read a core's private state.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from itertools import takewhile
from typing import TYPE_CHECKING, NamedTuple

from . import protocol, scheduler
from .events import Event, EventKind
from .metrics import RequestLedger
from .models import (
    Endpoint,
    FlowKey,
    Holder,
    Path,
    RebalanceRequest,
    RequestStatus,
    Ring,
    RpcRequest,
)
from .record import encode_dispatch_record, service_pointers

if TYPE_CHECKING:
    from .machine import Machine

logger = logging.getLogger(__name__)

PORT_BASE = 10_000


def service_port(service_id: int) -> int:
    """Destination port the OS installs for a service."""
    return PORT_BASE + service_id


class DemuxTable:
    """Destination port to service map, installed by the OS."""

    def __init__(self) -> None:
        self._ports: dict[int, int] = {}

    def install(self, service_id: int, port: int) -> None:
        owner = self._ports.get(port)
        if owner is not None and owner != service_id:
            raise ValueError(f"port {port} already belongs to service {owner}")
        self._ports[port] = service_id

    def lookup(self, flow_key: FlowKey) -> int | None:
        return self._ports.get(flow_key.dst_port)

    def __len__(self) -> int:
        return len(self._ports)


class MirrorEntry(NamedTuple):
    """What the NIC believes a core runs.

    As a queued update, a non-USER ring carries the endpoint the core left.
    """
    ring: Ring
    process: int
    endpoint: int


class SchedMirror:
    """The NIC's copy of per-core scheduling state."""

    def __init__(self, core_count: int) -> None:
        self.entries = [MirrorEntry(Ring.NONE, -1, -1)] * core_count
        self.queues: list[deque[MirrorEntry]] = [deque() for _ in range(core_count)]

    def cores_of(self, service_id: int) -> list[int]:
        return [c for c, e in enumerate(self.entries)
                if e.ring == Ring.USER and e.process == service_id]

    def cores_per_service(self) -> Counter[int]:
        return Counter(e.process for e in self.entries if e.ring == Ring.USER)

    def idle_cores(self) -> list[int]:
        return [c for c, e in enumerate(self.entries) if e.ring == Ring.NONE]

    def freeze(self) -> tuple:
        return tuple(self.entries), tuple(tuple(q) for q in self.queues)

    def load(self, frozen: tuple) -> None:
        entries, queues = frozen
        self.entries = list(entries)
        self.queues = [deque(q) for q in queues]


class ServiceLoadStats:
    """Per-service load statistics over a sliding window.

    ``depth`` counts requests that arrived for a service and were neither
    handed to a core nor dropped. Arrival times are kept for ``idle_windows``
    windows: the last window gives the arrival rate, the whole span tells
    whether a service has gone quiet.
    """

    def __init__(self, services: list[int], window_ns: int, idle_windows: int = 1) -> None:
        self.window_ns = window_ns
        self.span_ns = window_ns * idle_windows
        self.arrivals: Counter[int] = Counter()
        self.dispatches: Counter[int] = Counter()
        self.drops: Counter[int] = Counter()
        self.paths: dict[int, Counter[str]] = {s: Counter() for s in services}
        self.recent: dict[int, deque[int]] = {s: deque() for s in services}

    def arrival(self, service_id: int, now: int) -> None:
        self.arrivals[service_id] += 1
        times = self.recent[service_id]
        times.append(now)
        self._forget(times, now)

    def dispatched(self, service_id: int) -> None:
        self.dispatches[service_id] += 1

    def dropped(self, service_id: int) -> None:
        self.drops[service_id] += 1

    def decided(self, service_id: int, path: Path) -> None:
        self.paths[service_id][path.value] += 1

    def depth(self, service_id: int) -> int:
        return self.arrivals[service_id] - self.dispatches[service_id] - self.drops[service_id]

    def window_arrivals(self, service_id: int, now: int) -> int:
        """Arrivals in the window ending at ``now``."""
        start = now - self.window_ns
        return sum(1 for _ in takewhile(lambda t: t >= start, reversed(self.recent[service_id])))

    def quiet_arrivals(self, service_id: int) -> int:
        """Arrivals over the whole idle span, as of the last prune."""
        return len(self.recent[service_id])

    def _forget(self, times: deque[int], now: int) -> None:
        horizon = now - self.span_ns
        while times and times[0] < horizon:
            times.popleft()

    def prune(self, now: int) -> None:
        for times in self.recent.values():
            self._forget(times, now)


class Decision(NamedTuple):
    path: Path
    target: int = -1  # endpoint for fastpath, core for kernel dispatch


def _payload(request: RpcRequest) -> bytes:
    return bytes([request.request_id & 0xFF]) * request.args_len


def _waiting_core(m: Machine, line_id: int) -> int:
    pending = m.lines[line_id].pending
    return pending.core if pending is not None else -1


def endpoint_free(m: Machine, endpoint: Endpoint) -> bool:
    """Detached, drained, and no line carries an unfetched response."""
    if endpoint.attached_core >= 0 or endpoint.queue:
        return False
    return all(
        m.lines[l].holder != Holder.EXCLUSIVE and m.lines[l].pending is None
        for l in endpoint.control_lines
    )


def stalled_dispatchers(m: Machine) -> list[int]:
    """Cores waiting on their kernel line with no response left to fetch."""
    cores = []
    for core in m.cores:
        line_id = m.kernel_line(core.core_id)
        if _waiting_core(m, line_id) == core.core_id and not core.exclusive:
            cores.append(core.core_id)
    return cores


# -- packet path -------------------------------------------------------------

def on_arrival(m: Machine, request_id: int) -> None:
    """Steps 1-3: receive, protocol processing and demultiplex in the NIC pipeline."""
    request = m.requests[request_id]
    m.status[request_id] = RequestStatus.IN_NIC
    m.outstanding += 1
    if m.ledgers is not None:
        m.ledgers[request_id] = RequestLedger(request_id, request.service_id, Path.QUEUED, m.now)
    m.record("arrival", -1, -1, request_id)

    service_id = m.demux.lookup(request.flow_key)
    if service_id is None:
        logger.warning("request %d: no service for port %d", request_id, request.flow_key.dst_port)
        m.drop(request_id, "unknown_flow")
        return
    m.stats.arrival(service_id, m.now)
    arm_tick(m)

    delay = m.cost.nic_pipeline
    m.charge(request_id, "nic_pipeline", m.cost.nic_pipeline, cpu=False)
    if request.args_len >= m.cost.dma_threshold:
        m.charge(request_id, "dma_write", m.cost.dma_write, cpu=False)
        m.charge(request_id, "descriptor_fetch", m.cost.descriptor_fetch, cpu=False)
        delay += m.cost.dma_write + m.cost.descriptor_fetch
    m.emit(delay, Event(EventKind.DECODED, request=request_id))


def decide(m: Machine, service_id: int) -> Decision:
    """Pick where a decoded request goes.

    A user core waiting on one of the service's endpoints wins. Otherwise a
    stalled kernel dispatcher takes it if the service has no core or scale-out
    can give it a free endpoint. Otherwise the shortest attached endpoint
    queue, and only then the software kernel queue.
    """
    endpoints = [m.endpoints[e] for e in m.services[service_id].endpoints]
    waiting = [ep for ep in endpoints if _waiting_core(m, ep.active_line) >= 0]
    ready = [ep for ep in waiting if not m.cores[_waiting_core(m, ep.active_line)].exclusive]
    if ready or waiting:
        return Decision(Path.FASTPATH, (ready or waiting)[0].endpoint_id)

    attached = [ep for ep in endpoints if ep.attached_core >= 0]
    can_scale = m.sched.scale_out and any(endpoint_free(m, ep) for ep in endpoints)
    if not attached or can_scale:
        dispatchers = stalled_dispatchers(m)
        if dispatchers:
            return Decision(Path.KERNEL_DISPATCH, dispatchers[0])
    if attached:
        shortest = min(attached, key=lambda ep: (len(ep.queue), ep.endpoint_id))
        return Decision(Path.FASTPATH, shortest.endpoint_id)
    return Decision(Path.QUEUED)


def on_decoded(m: Machine, request_id: int) -> Decision:
    """The NIC pipeline has unmarshalled the request; hand it on."""
    request = m.requests[request_id]
    service_id = m.demux.lookup(request.flow_key)
    assert service_id is not None

    if request.args_len >= m.cost.dma_threshold:
        decision = Decision(Path.DMA)
        m.set_path(request_id, Path.DMA)
        m.stats.decided(service_id, Path.DMA)
        m.record("decision_dma", -1, -1, request_id)
        enqueue_kernel(m, request_id)
        return decision

    if m.codec:
        code_ptr, data_ptr = service_pointers(service_id, request.method_id)
        m.records[request_id] = encode_dispatch_record(code_ptr, data_ptr, _payload(request), m.cost)

    decision = decide(m, service_id)
    m.set_path(request_id, decision.path)
    m.stats.decided(service_id, decision.path)
    m.record(f"decision_{decision.path.value}", decision.target, -1, request_id)
    logger.debug("request %d -> %s %d", request_id, decision.path.value, decision.target)

    if decision.path == Path.FASTPATH:
        endpoint = m.endpoints[decision.target]
        endpoint.queue.append(request_id)
        service_line(m, endpoint.active_line)
    elif decision.path == Path.KERNEL_DISPATCH:
        reserve_endpoint(m, request_id, decision.target)
        m.endpoints[m.kernel_endpoint[decision.target]].queue.append(request_id)
        service_line(m, m.kernel_line(decision.target))
    else:
        enqueue_kernel(m, request_id)
    return decision


def enqueue_kernel(m: Machine, request_id: int) -> None:
    """Software queue for requests no core can take right now."""
    limit = m.nic_config.kernel_queue_limit
    if limit and len(m.kernel_queue) >= limit:
        m.drop(request_id, "queue_full")
        return
    m.kernel_queue.append(request_id)
    kick_dispatchers(m)


def kick_dispatchers(m: Machine) -> None:
    """Hand queued requests to stalled dispatchers; free user cores for the rest."""
    for core_id in stalled_dispatchers(m):
        if not m.kernel_queue:
            return
        service_line(m, m.kernel_line(core_id))
    if m.kernel_queue:
        scheduler.reclaim_for_queue(m)


def reserve_endpoint(m: Machine, request_id: int, core_id: int) -> int:
    """Bind a free endpoint of the request's service to the dispatching core.

    Returns -1 when the core must handle the request once and go back to the
    kernel loop.
    """
    service_id = m.requests[request_id].service_id
    endpoints = [m.endpoints[e] for e in m.services[service_id].endpoints]
    if not m.sched.scale_out and any(ep.attached_core >= 0 for ep in endpoints):
        return -1
    for endpoint in endpoints:
        if endpoint_free(m, endpoint):
            endpoint.attached_core = core_id
            m.reserved[request_id] = endpoint.endpoint_id
            return endpoint.endpoint_id
    return -1


def _steal(m: Machine) -> int:
    depth = m.nic_config.steal_depth
    if not depth or not m.sched.scale_out:
        return -1
    backlog = [ep for ep in m.endpoints if not ep.is_kernel and len(ep.queue) >= depth]
    if not backlog:
        return -1
    victim = max(backlog, key=lambda ep: (len(ep.queue), -ep.endpoint_id))
    request_id = victim.queue.pop()
    m.set_path(request_id, Path.KERNEL_DISPATCH)
    m.counters["steal"] += 1
    return request_id


def next_record(m: Machine, endpoint: Endpoint, core_id: int) -> int:
    """Next request for a load on ``endpoint``, or -1."""
    if endpoint.queue:
        return endpoint.queue.popleft()
    if not endpoint.is_kernel:
        return -1
    if m.kernel_queue:
        request_id = m.kernel_queue.popleft()
    else:
        request_id = _steal(m)
        if request_id < 0:
            return -1
    reserve_endpoint(m, request_id, core_id)
    return request_id


def service_line(m: Machine, line_id: int) -> bool:
    """Fulfill the load pending on ``line_id`` if there is work for it.

    A core that still holds an unfetched response is served only after the
    fetch completes.
    """
    line = m.lines[line_id]
    if line.pending is None:
        return False
    core = m.cores[line.pending.core]
    if core.exclusive and not m.nic_config.fulfill_before_fetch:
        return False
    endpoint = m.endpoints[line.endpoint_id]
    if line_id != endpoint.active_line:
        raise protocol.ProtocolViolation(
            f"load pending on inactive line {line_id} of endpoint {endpoint.endpoint_id}",
            core.core_id, line_id,
        )
    request_id = next_record(m, endpoint, core.core_id)
    if request_id < 0:
        return False
    protocol.nic_fulfill(m, line_id, request_id)
    return True


# -- scheduler mirror --------------------------------------------------------

def mirror_update(m: Machine, core_id: int, ring: Ring, process: int, endpoint: int) -> None:
    """Queue a scheduling change for the NIC; it lands one round trip later."""
    m.mirror.queues[core_id].append(MirrorEntry(ring, process, endpoint))
    m.emit(m.cost.coherent_line_roundtrip, Event(EventKind.MIRROR, core_id))


def apply_mirror(m: Machine, core_id: int) -> None:
    update = m.mirror.queues[core_id].popleft()
    if update.ring == Ring.USER:
        m.mirror.entries[core_id] = update
        return
    m.mirror.entries[core_id] = MirrorEntry(update.ring, -1, -1)
    if update.endpoint >= 0:
        endpoint = m.endpoints[update.endpoint]
        if endpoint.attached_core == core_id:
            detach(m, endpoint)


def detach(m: Machine, endpoint: Endpoint) -> None:
    """The endpoint's core left; its backlog goes to the kernel queue."""
    endpoint.attached_core = -1
    moved = list(endpoint.queue)
    endpoint.queue.clear()
    for request_id in moved:
        if m.paths.get(request_id) == Path.FASTPATH:
            m.set_path(request_id, Path.QUEUED)
        m.kernel_queue.append(request_id)
        m.record("requeue", -1, -1, request_id)
    if moved:
        m.counters["requeue"] += len(moved)
        kick_dispatchers(m)


def on_preempt_notice(m: Machine, core_id: int) -> None:
    """The OS told the NIC a core is being preempted: release its stalled load."""
    core = m.cores[core_id]
    if core.ring != Ring.USER or _waiting_core(m, core.line) != core_id:
        return
    protocol.nic_try_again(m, core.line)


# -- statistics and rebalancing ----------------------------------------------

def arm_tick(m: Machine) -> None:
    if m.timed and m.nic_config.rebalance and not m.tick_armed:
        m.tick_armed = True
        m.emit(m.nic_config.window_ns, Event(EventKind.REBALANCE))


def suggest_rebalance(m: Machine) -> RebalanceRequest | None:
    """Watermark policy over live queue depths and windowed arrivals.

    The deepest service asks for one more core when its depth, or the shared
    kernel queue, is above ``hi_watermark``. The core comes from an idle
    service holding one, else from a retired core. A service is idle once
    nothing of it is queued and it saw at most ``lo_watermark`` arrivals over
    the last ``idle_windows`` windows; an idle service holding more than one
    core gives one back.
    """
    services = sorted(m.services)
    if not any(m.stats.arrivals[s] for s in services):
        return None
    m.stats.prune(m.now)
    hi = m.nic_config.hi_watermark
    lo = m.nic_config.lo_watermark
    depth = {s: m.stats.depth(s) for s in services}
    rate = {s: m.stats.window_arrivals(s, m.now) for s in services}
    held = m.mirror.cores_per_service()
    idle = [s for s in services if depth[s] == 0 and m.stats.quiet_arrivals(s) <= lo]

    deepest = max(services, key=lambda s: (depth[s], rate[s], -s))
    backlog = len(m.kernel_queue) > hi and depth[deepest] > 0
    if depth[deepest] > hi or backlog:
        donors = [s for s in idle if s != deepest and held[s] > 0]
        if donors:
            donor = max(donors, key=lambda s: (held[s], -s))
            return RebalanceRequest(deepest, 1, donor)
        if m.mirror.idle_cores():
            return RebalanceRequest(deepest, 1, -1)
        return None

    for s in idle:
        if held[s] > 1:
            return RebalanceRequest(s, -1)
    return None


def on_tick(m: Machine) -> None:
    m.tick_armed = False
    suggestion = suggest_rebalance(m)
    if suggestion is not None:
        m.counters["rebalance_request"] += 1
        m.record("rebalance", -1, -1, suggestion.service)
        scheduler.apply_rebalance(m, suggestion)
    if m.active():
        arm_tick(m)
