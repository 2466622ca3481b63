"""Events exchanged between the NIC, the cores and the environment."""

from enum import IntEnum
from typing import NamedTuple


class EventKind(IntEnum):
    ARRIVAL = 0        # packet fully received (request)
    DECODED = 1        # NIC pipeline finished (request)
    DELIVER = 2        # line contents reach a core (core, line, request, arg=Content)
    HANDLER_DONE = 3   # handler finished (core, request)
    SWITCH_DONE = 4    # context switch finished (core, line=endpoint, request, arg=process)
    FETCH_DONE = 5     # NIC pulled a response line back (core, line, request)
    TIMEOUT = 6        # TRY_AGAIN timer (core, line)
    MIRROR = 7         # head of a core's mirror update queue reaches the NIC (core)
    NIC_PREEMPT = 8    # preemption notice reaches the NIC (core)
    RELOAD = 9         # dispatcher done with schedule bookkeeping (core)
    PREEMPT = 10       # OS decides to preempt (core)
    RETIRE = 11        # OS retires a stalled dispatcher (core)
    REJOIN = 12        # OS returns a retired core to the kernel loop (core)
    REBALANCE = 13     # NIC statistics tick


class Event(NamedTuple):
    kind: EventKind
    core: int = -1
    line: int = -1
    request: int = -1
    arg: int = 0

    def describe(self) -> str:
        parts = [f"core={self.core}"] if self.core >= 0 else []
        if self.line >= 0:
            parts.append(f"line={self.line}")
        if self.request >= 0:
            parts.append(f"request={self.request}")
        if self.arg:
            parts.append(f"arg={self.arg}")
        return f"{self.kind.name.lower()}({', '.join(parts)})"


# Exploration category of each event kind; None fires as soon as it is emitted.
_CATEGORY: dict[EventKind, str | None] = {
    EventKind.ARRIVAL: "arrival",
    EventKind.DECODED: None,
    EventKind.DELIVER: "load",
    EventKind.HANDLER_DONE: "load",
    EventKind.SWITCH_DONE: "load",
    EventKind.FETCH_DONE: "load",
    EventKind.RELOAD: "load",
    EventKind.TIMEOUT: "timeout",
    EventKind.MIRROR: "mirror",
    EventKind.NIC_PREEMPT: "ipi",
    EventKind.PREEMPT: "ipi",
    EventKind.RETIRE: None,
    EventKind.REJOIN: None,
    EventKind.REBALANCE: None,
}


def category(event: Event) -> str | None:
    return _CATEGORY[event.kind]
