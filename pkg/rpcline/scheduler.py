"""OS side of NIC-driven scheduling.

Kernel dispatcher threads wait on their core's kernel endpoint. A record
arriving there makes the core switch into the target process, run the first
request in software and then wait on the process's user endpoint, where later
requests arrive ready to run. Cores leave a user loop by preemption (IPI plus
TRY_AGAIN), by yielding, or after a one-shot request when no endpoint was free.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

from . import nic, protocol
from .events import Event, EventKind
from .models import Content, CoreMode, CoreState, RebalanceRequest, Ring
from .record import decode_dispatch_record

if TYPE_CHECKING:
    from .machine import Machine

logger = logging.getLogger(__name__)


def on_deliver(m: Machine, core_id: int, line_id: int, request_id: int, content: int) -> None:
    """A dispatch record (or a stale response on a hit) reaches a stalled core."""
    core = m.cores[core_id]
    if core.mode != CoreMode.STALLED or core.line != line_id:
        raise protocol.ProtocolViolation(
            f"delivery on line {line_id} to core {core_id} which is not waiting on it",
            core_id, line_id,
        )
    if content == Content.RECORD and m.codec:
        _check_record(m, request_id)
    core.request = request_id
    m.record("deliver", core_id, line_id, request_id)

    if core.ring == Ring.KERNEL:
        kernel_dispatch(m, core_id, request_id)
        return
    core.mode = CoreMode.EXECUTING
    m.charge(request_id, "jump", m.cost.jump_cost)
    _start_handler(m, core_id, request_id, m.cost.jump_cost)


def _check_record(m: Machine, request_id: int) -> None:
    record = m.records.pop(request_id, None)
    if record is None:
        return
    _, _, args = decode_dispatch_record(record.lines, m.cost)
    if len(args) != m.requests[request_id].args_len:
        raise protocol.ProtocolViolation(f"record for request {request_id} decoded short")


def _start_handler(m: Machine, core_id: int, request_id: int, lead_ns: int) -> None:
    request = m.requests[request_id]
    handler_ns = m.cost.cycles_to_ns(request.handler_cycles)
    ledger = m.ledger(request_id)
    if ledger is not None and ledger.handler_start < 0:
        ledger.handler_start = m.now + lead_ns
    m.charge(request_id, "handler", handler_ns)
    m.emit(lead_ns + handler_ns, Event(EventKind.HANDLER_DONE, core_id, request=request_id))


def kernel_dispatch(m: Machine, core_id: int, request_id: int) -> None:
    """Kernel dispatcher received a record: switch into the target process."""
    core = m.cores[core_id]
    request = m.requests[request_id]
    if request.service_id not in m.services:
        m.drop(request_id, "no_process")
        enter_kernel_loop(m, core_id)
        return
    endpoint = m.reserved.pop(request_id, -1)
    core.mode = CoreMode.CONTEXT_SWITCHING
    m.counters["context_switch"] += 1
    m.record("context_switch", core_id, core.line, request_id)
    m.charge(request_id, "context_switch", m.cost.context_switch)
    m.emit(m.cost.context_switch,
           Event(EventKind.SWITCH_DONE, core_id, endpoint, request_id, request.service_id))


def on_switch_done(m: Machine, core_id: int, process: int, request_id: int, endpoint: int) -> None:
    core = m.cores[core_id]
    if process < 0:
        enter_kernel_loop(m, core_id)
        return
    core.ring = Ring.USER
    core.process = process
    core.endpoint = endpoint
    core.mode = CoreMode.EXECUTING
    core.last_process = process
    nic.mirror_update(m, core_id, Ring.USER, process, endpoint)

    # Steps 10-12 in software for the first request only.
    args_len = m.requests[request_id].args_len
    m.charge(request_id, "unmarshal", m.cost.unmarshal(args_len))
    m.charge(request_id, "fn_lookup", m.cost.fn_lookup)
    m.charge(request_id, "jump", m.cost.jump_cost)
    _start_handler(m, core_id, request_id, m.cost.software_dispatch(args_len))


def on_handler_done(m: Machine, core_id: int, request_id: int) -> None:
    core = m.cores[core_id]
    protocol.write_response(m, core_id, core.line, request_id)
    core.request = -1
    if core.pending_ipi:
        kernel_entry(m, core_id, "kernel_entry")
    elif core.endpoint < 0:
        kernel_entry(m, core_id, "kernel_return")
    elif core.yield_requested:
        voluntary_yield(m, core_id)
    else:
        core.mode = CoreMode.USER_LOOP
        protocol.core_load(m, core_id, m.endpoints[core.endpoint].active_line)


def kernel_entry(m: Machine, core_id: int, kind: str) -> None:
    """Leave the user loop; the NIC hears about it through the mirror."""
    core = m.cores[core_id]
    left = core.endpoint
    core.pending_ipi = False
    core.yield_requested = False
    core.ring = Ring.KERNEL
    core.process = -1
    core.endpoint = -1
    core.request = -1
    core.mode = CoreMode.CONTEXT_SWITCHING
    m.counters[kind] += 1
    m.counters["kernel_ns"] += m.cost.context_switch
    m.record(kind, core_id, core.line)
    nic.mirror_update(m, core_id, Ring.KERNEL, -1, left)
    m.emit(m.cost.context_switch, Event(EventKind.SWITCH_DONE, core_id, -1, -1, -1))


def voluntary_yield(m: Machine, core_id: int) -> None:
    kernel_entry(m, core_id, "yield")


def on_try_again(m: Machine, core_id: int, line_id: int) -> None:
    """A stalled core got TRY_AGAIN."""
    core = m.cores[core_id]
    if core.ring != Ring.USER:
        enter_kernel_loop(m, core_id)
        return
    core.mode = CoreMode.USER_LOOP
    if core.pending_ipi:
        kernel_entry(m, core_id, "kernel_entry")
    elif core.yield_requested or m.sched.yield_on_try_again:
        voluntary_yield(m, core_id)
    else:
        protocol.core_load(m, core_id, line_id)


def periodic_schedule(m: Machine, core_id: int) -> bool:
    """Dispatcher bookkeeping, at most once per schedule period."""
    period = m.sched.schedule_period_ns
    if not m.timed or period == 0:
        return False
    core = m.cores[core_id]
    if m.now - core.last_schedule < period:
        return False
    core.last_schedule = m.now
    m.counters["schedule"] += 1
    m.counters["kernel_ns"] += m.cost.schedule_cost
    m.record("schedule", core_id)
    return True


def enter_kernel_loop(m: Machine, core_id: int) -> None:
    core = m.cores[core_id]
    core.mode = CoreMode.KERNEL_LOOP
    if periodic_schedule(m, core_id):
        m.emit(m.cost.schedule_cost, Event(EventKind.RELOAD, core_id))
        return
    protocol.core_load(m, core_id, m.kernel_line(core_id))


def reload(m: Machine, core_id: int) -> None:
    if m.cores[core_id].mode == CoreMode.KERNEL_LOOP:
        protocol.core_load(m, core_id, m.kernel_line(core_id))


def preempt(m: Machine, core_id: int) -> bool:
    """Send an IPI to a user-loop core. Anything else is left alone."""
    core = m.cores[core_id]
    if core.ring != Ring.USER or core.pending_ipi:
        m.counters["preempt_noop"] += 1
        return False
    core.pending_ipi = True
    m.counters["ipi"] += 1
    m.counters[f"ipi_{m.sched.ipi_origin}"] += 1
    m.record("ipi", core_id, core.line)
    m.emit(m.cost.coherent_line_roundtrip, Event(EventKind.NIC_PREEMPT, core_id))
    return True


def on_retire(m: Machine, core_id: int) -> None:
    core = m.cores[core_id]
    core.mode = CoreMode.IDLE
    core.ring = Ring.NONE
    core.process = -1
    core.endpoint = -1
    nic.mirror_update(m, core_id, Ring.NONE, -1, -1)


def rejoin(m: Machine, core_id: int) -> bool:
    """Return a retired core to the kernel dispatch loop."""
    core = m.cores[core_id]
    if core.mode != CoreMode.IDLE:
        return False
    core.ring = Ring.KERNEL
    core.mode = CoreMode.KERNEL_LOOP
    m.counters["rejoin"] += 1
    m.record("rejoin", core_id)
    nic.mirror_update(m, core_id, Ring.KERNEL, -1, -1)
    protocol.core_load(m, core_id, m.kernel_line(core_id))
    return True


def select_victim(m: Machine, service_id: int) -> int | None:
    """Least recently fulfilled core running ``service_id``."""
    cores = [c for c in m.cores if c.ring == Ring.USER and c.process == service_id
             and not c.pending_ipi and not c.yield_requested]
    if not cores:
        return None
    return min(cores, key=lambda c: (c.last_fulfilled, c.core_id)).core_id


def _spare_dispatcher(m: Machine) -> int | None:
    dispatchers = nic.stalled_dispatchers(m)
    if len(dispatchers) < 2:
        return None
    return min(dispatchers, key=lambda c: (m.cores[c].last_fulfilled, c))


def idle_user_cores(m: Machine) -> list[int]:
    """User-loop cores stalled on a drained endpoint, least recently fulfilled first."""
    cores = []
    for core in m.cores:
        if core.ring != Ring.USER or core.pending_ipi or core.yield_requested:
            continue
        if core.mode != CoreMode.STALLED or core.endpoint < 0:
            continue
        if m.endpoints[core.endpoint].queue:
            continue
        cores.append(core)
    return [c.core_id for c in sorted(cores, key=lambda c: (c.last_fulfilled, c.core_id))]


def _bound_for_kernel_loop(m: Machine, core: CoreState) -> bool:
    if core.pending_ipi or core.yield_requested:
        return True
    if core.ring != Ring.KERNEL or core.request >= 0:
        return False
    # stalled with the load already answered: a record is on its way
    return not (core.mode == CoreMode.STALLED and m.lines[core.line].pending is None)


def reclaim_for_queue(m: Machine) -> int:
    """Send idle user-loop cores back to the kernel while requests wait in its queue.

    Cores already bound for the kernel loop count against the backlog, so at
    most one core is released per queued request. Returns the number released.
    """
    backlog = len(m.kernel_queue)
    if not backlog:
        return 0
    coming = sum(1 for c in m.cores if _bound_for_kernel_loop(m, c))
    released = 0
    for core_id in idle_user_cores(m):
        if coming + released >= backlog:
            break
        _reclaim(m, core_id)
        released += 1
    if released:
        m.counters["queue_reclaim"] += released
        logger.debug("released %d user cores for %d queued requests", released, backlog)
    return released


def _reclaim(m: Machine, core_id: int) -> None:
    if m.sched.non_preemptive:
        m.cores[core_id].yield_requested = True
        m.record("yield_request", core_id)
    else:
        preempt(m, core_id)


def apply_rebalance(m: Machine, request: RebalanceRequest) -> int | None:
    """Carry out a NIC rebalance request; returns the core acted on.

    Growing takes the least recently fulfilled core of the donor service, or
    rejoins a retired core. Shrinking reclaims one core of the service and
    retires a surplus kernel dispatcher so the core goes to non-RPC work.
    """
    victim: int | None = None
    if request.delta_cores > 0 and request.donor < 0:
        idle = [c.core_id for c in m.cores if c.mode == CoreMode.IDLE]
        if idle and rejoin(m, idle[0]):
            victim = idle[0]
    elif request.delta_cores > 0:
        victim = select_victim(m, request.donor)
        if victim is not None:
            _reclaim(m, victim)
    elif request.delta_cores < 0:
        victim = select_victim(m, request.service)
        if victim is not None:
            _reclaim(m, victim)
            spare = _spare_dispatcher(m)
            if spare is not None:
                protocol.retire_thread(m, spare)

    if victim is None:
        m.counters["rebalance_ignored"] += 1
        logger.debug("rebalance %s ignored: no eligible core", request)
        return None
    m.counters["rebalance"] += 1
    logger.debug("rebalance %s acted on core %d", request, victim)
    return victim
