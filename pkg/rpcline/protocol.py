"""Coherence endpoint protocol between the NIC and a core.

A core asks for work by loading the active CONTROL line of an endpoint. The
NIC, which is the home of the line, holds the load until it has a dispatch
record for it, answers with TRY_AGAIN when the timer expires, or with RETIRE
when the OS takes the thread away. The handler writes its response into the
line it ran from; the NIC pulls that line back (fetch exclusive) when the core
next loads, and only then may it fulfill a load from the same core.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, NamedTuple

from . import nic, scheduler
from .events import Event, EventKind
from .models import (
    NIC,
    Content,
    CoreMode,
    Holder,
    MessageKind,
    Path,
    PendingLoad,
    ProtocolMessage,
    RequestStatus,
    Ring,
)

if TYPE_CHECKING:
    from .machine import Machine

logger = logging.getLogger(__name__)


class ProtocolViolation(Exception):
    """A transition the line protocol forbids.

    ``prop`` names the safety property the transition breaks.
    """

    def __init__(self, message: str, core: int = -1, line: int = -1, prop: str = "exclusive_owner") -> None:
        super().__init__(message)
        self.core = core
        self.line = line
        self.prop = prop


class LoadOutcome(NamedTuple):
    """Result of issuing a load.

    ``completed`` loads deliver at ``time``; stalled loads time out at ``time``.
    """
    completed: bool
    time: int
    request_id: int = -1


def core_load(m: Machine, core_id: int, line_id: int) -> LoadOutcome:
    """Core ``core_id`` loads CONTROL line ``line_id``.

    Raises:
        ProtocolViolation: If the core is already stalled, another core has a
            load pending on the line, or another core holds it exclusive
    """
    core = m.cores[core_id]
    if core.mode == CoreMode.STALLED:
        raise ProtocolViolation(
            f"core {core_id} loads line {line_id} while stalled on line {core.line}",
            core_id, line_id,
        )
    line = m.lines[line_id]

    if line_id in core.exclusive:
        # A hit on our own unfetched response: no message reaches the NIC.
        m.counters["stale_hit"] += 1
        m.record("load_hit", core_id, line_id, line.content_request)
        core.mode = CoreMode.STALLED
        core.line = line_id
        start_fetch(m, core_id)
        m.emit(0, Event(EventKind.DELIVER, core_id, line_id, line.content_request,
                        int(Content.RESPONSE)))
        return LoadOutcome(True, m.now, line.content_request)

    if line.pending is not None:
        raise ProtocolViolation(
            f"line {line_id} already has a pending load from core {line.pending.core}",
            core_id, line_id,
        )
    if line.holder == Holder.EXCLUSIVE:
        raise ProtocolViolation(
            f"core {core_id} loads line {line_id} held exclusive by core {line.holder_core}",
            core_id, line_id,
        )

    # The NIC invalidates the shared copy left by the previous answer.
    line.holder = Holder.NIC
    line.holder_core = NIC
    line.content = Content.EMPTY
    line.content_request = -1
    timeout = m.cost.try_again_timeout
    line.pending = PendingLoad(core_id, m.now, m.now + timeout)
    core.mode = CoreMode.STALLED
    core.line = line_id
    core.request = -1
    m.record("load", core_id, line_id)
    m.emit(timeout, Event(EventKind.TIMEOUT, core_id, line_id))
    start_fetch(m, core_id)

    if nic.service_line(m, line_id):
        return LoadOutcome(True, m.now + m.cost.coherent_line_roundtrip, line.content_request)
    if core.ring == Ring.USER and m.kernel_queue:
        scheduler.reclaim_for_queue(m)
    return LoadOutcome(False, m.now + timeout)


def nic_fulfill(m: Machine, line_id: int, request_id: int) -> ProtocolMessage | None:
    """Answer the pending load on ``line_id`` with a dispatch record.

    With no load pending the record is queued on the line's endpoint instead.
    """
    line = m.lines[line_id]
    endpoint = m.endpoints[line.endpoint_id]
    if line.pending is None:
        endpoint.queue.append(request_id)
        m.record("queue", -1, line_id, request_id)
        return None

    core_id = line.pending.core
    core = m.cores[core_id]
    line.pending = None
    line.holder = Holder.SHARED
    line.holder_core = core_id
    line.content = Content.RECORD
    line.content_request = request_id
    endpoint.active_index ^= 1

    request = m.requests[request_id]
    m.status[request_id] = RequestStatus.DELIVERED
    core.last_fulfilled = m.now
    m.stats.dispatched(request.service_id)

    roundtrip = m.cost.coherent_line_roundtrip
    delay = roundtrip
    if m.paths.get(request_id) != Path.DMA and m.cost.aux_count(request.args_len):
        delay += roundtrip
    m.charge(request_id, "line_delivery", delay, cpu=False)
    m.record("fulfill", core_id, line_id, request_id)
    m.emit(delay, Event(EventKind.DELIVER, core_id, line_id, request_id, int(Content.RECORD)))
    return ProtocolMessage(MessageKind.FULFILL, line_id, core_id, request_id)


def nic_try_again(m: Machine, line_id: int) -> ProtocolMessage | None:
    """Release the stalled load on ``line_id`` with no payload."""
    line = m.lines[line_id]
    if line.pending is None:
        return None
    core_id = line.pending.core
    line.pending = None
    line.holder = Holder.SHARED
    line.holder_core = core_id
    line.content = Content.TRY_AGAIN
    line.content_request = -1
    m.counters["try_again"] += 1
    m.record("try_again", core_id, line_id)
    scheduler.on_try_again(m, core_id, line_id)
    return ProtocolMessage(MessageKind.TRY_AGAIN, line_id, core_id)


def on_timeout(m: Machine, core_id: int, line_id: int) -> ProtocolMessage | None:
    """TRY_AGAIN timer for a load; stale timers do nothing."""
    pending = m.lines[line_id].pending
    if pending is None or pending.core != core_id:
        return None
    if m.timed and pending.deadline != m.now:
        return None
    return nic_try_again(m, line_id)


def retire_thread(m: Machine, core_id: int) -> ProtocolMessage:
    """Answer a kernel dispatcher's stalled load with RETIRE.

    Raises:
        ProtocolViolation: If the core is not stalled on a kernel CONTROL line
    """
    core = m.cores[core_id]
    if core.mode != CoreMode.STALLED:
        raise ProtocolViolation(f"RETIRE for core {core_id} which is not stalled", core_id)
    endpoint = m.endpoint_of(core.line)
    if not endpoint.is_kernel:
        raise ProtocolViolation(
            f"RETIRE on user endpoint {endpoint.endpoint_id}", core_id, core.line
        )
    line = m.lines[core.line]
    if line.pending is None or line.pending.core != core_id:
        raise ProtocolViolation(f"core {core_id} has no pending load to retire", core_id, core.line)

    line.pending = None
    line.holder = Holder.SHARED
    line.holder_core = core_id
    line.content = Content.RETIRE
    line.content_request = -1
    m.counters["retire"] += 1
    m.record("retire", core_id, line.line_id)
    scheduler.on_retire(m, core_id)
    return ProtocolMessage(MessageKind.RETIRE, line.line_id, core_id)


def write_response(m: Machine, core_id: int, line_id: int, request_id: int) -> None:
    """The handler stores its response into the line it was dispatched on."""
    line = m.lines[line_id]
    if line.holder == Holder.EXCLUSIVE and line.holder_core != core_id:
        raise ProtocolViolation(
            f"core {core_id} writes line {line_id} held exclusive by core {line.holder_core}",
            core_id, line_id,
        )
    line.holder = Holder.EXCLUSIVE
    line.holder_core = core_id
    line.content = Content.RESPONSE
    line.content_request = request_id
    core = m.cores[core_id]
    core.exclusive = core.exclusive | {line_id}
    m.record("response", core_id, line_id, request_id)


def start_fetch(m: Machine, core_id: int) -> None:
    """Fetch every unfetched response line of a core that just loaded."""
    core = m.cores[core_id]
    for line_id in sorted(core.exclusive - core.fetching):
        request_id = m.lines[line_id].content_request
        core.fetching = core.fetching | {line_id}
        m.record("fetch_exclusive", core_id, line_id, request_id)
        m.emit(m.cost.coherent_line_roundtrip,
               Event(EventKind.FETCH_DONE, core_id, line_id, request_id))


def finish_fetch(m: Machine, core_id: int, line_id: int, request_id: int) -> None:
    """The NIC owns the response line again and puts the response on the wire.

    Raises:
        ProtocolViolation: If the line no longer holds a response of this core
    """
    line = m.lines[line_id]
    core = m.cores[core_id]
    core.fetching = core.fetching - {line_id}
    if (line.holder != Holder.EXCLUSIVE or line.holder_core != core_id
            or line.content != Content.RESPONSE):
        raise ProtocolViolation(
            f"fetch of line {line_id} found no response from core {core_id}",
            core_id, line_id, prop="single_response",
        )
    request_id = line.content_request
    line.holder = Holder.NIC
    line.holder_core = NIC
    line.content = Content.EMPTY
    line.content_request = -1
    core.exclusive = core.exclusive - {line_id}
    m.charge(request_id, "response_fetch", m.cost.coherent_line_roundtrip, cpu=False)
    m.transmit(request_id, core_id)

    if core.mode == CoreMode.STALLED:
        if core.exclusive - core.fetching:
            start_fetch(m, core_id)
        elif not core.exclusive:
            nic.service_line(m, core.line)
