"""Exhaustive exploration of the line protocol and the scheduler.

States are ``Machine`` snapshots plus the multiset of events still in flight
and the environment's budget. Time is frozen: a TRY_AGAIN timer is just
another event that may fire now or later. Successors come from firing any
enabled event of a permuted category, or from an environment move (inject
the next packet, preempt a user core, retire or rejoin a dispatcher). Events
of categories that are not permuted fire immediately, in order.

Safety properties checked:

- single_response: no request transmitted twice; every request ends completed or dropped
- exclusive_owner: no line exclusive at two cores, no load pending on a line another core
  holds exclusive
- timer_armed: every pending load has an armed TRY_AGAIN timer
- ipi_consumed: no terminal state leaves an IPI unconsumed
- no_request_lost: terminal states have no request in flight
"""

from __future__ import annotations

import itertools
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

from . import nic
from .events import Event, EventKind, category
from .machine import Machine
from .models import (
    CheckerConfig,
    CoreMode,
    CostModel,
    FlowKey,
    Holder,
    NicConfig,
    RequestStatus,
    Ring,
    RpcRequest,
    SchedulerConfig,
    Service,
    TraceRecord,
)
from .protocol import ProtocolViolation
from .workload import CLIENT_ADDR_BASE, SERVER_ADDR

logger = logging.getLogger(__name__)

ENV_KINDS = frozenset({EventKind.ARRIVAL, EventKind.PREEMPT, EventKind.RETIRE, EventKind.REJOIN})

CHECK_ARGS_LEN = 64


class StateBoundExceeded(Exception):
    """Exploration hit ``max_states``; ``partial`` holds what was explored."""

    def __init__(self, partial: CheckResult, frontier: int) -> None:
        super().__init__(
            f"state bound {partial.states_visited} exceeded with {frontier} states on the frontier"
        )
        self.partial = partial
        self.frontier = frontier


class SemanticsMismatch(Exception):
    """Replaying a checker trace did not reproduce the checker's states."""
    pass


class Node(NamedTuple):
    frozen: tuple
    pending: tuple[Event, ...]
    env: tuple[int, int, int]  # next packet, preemptions used, retires used


@dataclass(frozen=True)
class Violation:
    """A property violation and the shortest event sequence reaching it."""
    prop: str
    message: str
    events: tuple[Event, ...]
    state: tuple | None = field(default=None, compare=False, repr=False)


@dataclass
class CheckResult:
    states_visited: int = 0
    transitions: int = 0
    terminal_states: int = 0
    max_depth: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


class _Edge(NamedTuple):
    child: Node | None
    events: tuple[Event, ...]
    problem: tuple[str, str] | None
    key: Node | None = None  # canonical form of child


# -- model construction -------------------------------------------------------

def checker_requests(config: CheckerConfig) -> list[RpcRequest]:
    """Packets injected by the environment, round-robin over the services."""
    requests = []
    for i in range(config.packets):
        service_id = i % config.endpoints
        flow = FlowKey(CLIENT_ADDR_BASE + i, 1024 + i, SERVER_ADDR, nic.service_port(service_id))
        requests.append(RpcRequest(i, flow, service_id, 0, CHECK_ARGS_LEN, 0))
    return requests


def build_checker_machine(
    config: CheckerConfig,
    cost: CostModel | None = None,
    record_trace: bool = False,
) -> Machine:
    """Untimed machine with one user endpoint per service and its packets admitted."""
    nic_config = NicConfig(
        endpoints_per_service=1,
        aux_lines=0,
        rebalance=False,
        fulfill_before_fetch=config.fulfill_before_fetch,
    )
    sched = SchedulerConfig(
        schedule_period_ns=0,
        scale_out=config.scale_out,
        yield_on_try_again=config.yield_on_try_again,
    )
    services = [Service(service_id=s) for s in range(config.endpoints)]
    m = Machine(
        cost or CostModel(),
        nic_config,
        sched,
        config.cores,
        services,
        timed=False,
        strict=True,
        codec=False,
        keep_ledgers=False,
        record_trace=record_trace,
    )
    for request in checker_requests(config):
        m.admit(request)
    return m


# -- state properties ---------------------------------------------------------

def check_state(m: Machine, pending: Sequence[Event]) -> tuple[str, str] | None:
    """Properties that must hold in every state."""
    owners: dict[int, int] = {}
    for core in m.cores:
        for line_id in core.exclusive:
            if line_id in owners:
                return "exclusive_owner", f"line {line_id} exclusive at cores {owners[line_id]} and {core.core_id}"
            owners[line_id] = core.core_id
    timers = {(e.core, e.line) for e in pending if e.kind == EventKind.TIMEOUT}
    for line in m.lines.values():
        if line.holder == Holder.EXCLUSIVE and owners.get(line.line_id) != line.holder_core:
            return "exclusive_owner", f"line {line.line_id} exclusive at core {line.holder_core} untracked"
        if line.pending is None:
            continue
        if line.holder == Holder.EXCLUSIVE and line.holder_core != line.pending.core:
            return "exclusive_owner", (f"core {line.pending.core} waits on line {line.line_id}"
                          f" held exclusive by core {line.holder_core}")
        if (line.pending.core, line.line_id) not in timers:
            return "timer_armed", f"load of core {line.pending.core} on line {line.line_id} has no timer"
    return None


def check_terminal(m: Machine) -> tuple[str, str] | None:
    """Properties of a state with nothing left to happen."""
    for request_id, status in m.status.items():
        if status == RequestStatus.COMPLETED and m.responses[request_id] != 1:
            return "single_response", f"request {request_id} transmitted {m.responses[request_id]} times"
        if status in (RequestStatus.IN_NIC, RequestStatus.DELIVERED):
            return "no_request_lost", f"request {request_id} still in flight ({status.name.lower()})"
        if status == RequestStatus.PENDING:
            return "no_request_lost", f"request {request_id} never arrived"
    for core in m.cores:
        if core.pending_ipi:
            return "ipi_consumed", f"core {core.core_id} never entered the kernel after its IPI"
    queued = [e.endpoint_id for e in m.endpoints if e.queue]
    if queued or m.kernel_queue:
        return "no_request_lost", f"requests left queued (endpoints {queued}, kernel {len(m.kernel_queue)})"
    stale = m.mirror_consistent()
    if stale:
        return "mirror", f"scheduler mirror diverged for cores {stale}"
    return None


# -- symmetry -----------------------------------------------------------------

class CoreSymmetry:
    """Renames cores (with their kernel endpoints and lines) to a canonical order."""

    def __init__(self, m: Machine) -> None:
        self.cores = len(m.cores)
        self.line_ids = list(m.lines)
        self.line_index = {line_id: i for i, line_id in enumerate(self.line_ids)}
        self.maps = []
        for perm in itertools.permutations(range(self.cores)):
            endpoints = {e: e for e in range(len(m.endpoints))}
            lines = {line_id: line_id for line_id in self.line_ids}
            for old, new in enumerate(perm):
                src = m.endpoints[m.kernel_endpoint[old]]
                dst = m.endpoints[m.kernel_endpoint[new]]
                endpoints[src.endpoint_id] = dst.endpoint_id
                for a, b in zip(src.control_lines, dst.control_lines):
                    lines[a] = b
            self.maps.append((perm, endpoints, lines))

    def canonical(self, node: Node) -> Node:
        return min(self._rename(node, *maps) for maps in self.maps)

    def _rename(self, node: Node, perm: tuple[int, ...], em: dict, lm: dict) -> Node:
        def c(x: int) -> int:
            return perm[x] if x >= 0 else x

        def e(x: int) -> int:
            return em[x] if x >= 0 else x

        def l(x: int) -> int:
            return lm[x] if x >= 0 else x

        cores_t, lines_t, endpoints_t, kernel_queue, mirror, reserved, requests = node.frozen
        cores: list[Any] = [None] * self.cores
        for old, (mode, ring, process, endpoint, line, request, ipi, yielding, ex, fe) in enumerate(cores_t):
            cores[perm[old]] = (mode, ring, process, e(endpoint), l(line), request, ipi, yielding,
                                tuple(sorted(l(x) for x in ex)), tuple(sorted(l(x) for x in fe)))
        lines: list[Any] = [None] * len(lines_t)
        for i, (holder, holder_core, pending, content, content_request) in enumerate(lines_t):
            lines[self.line_index[l(self.line_ids[i])]] = (
                holder, c(holder_core), c(pending), content, content_request)
        endpoints: list[Any] = [None] * len(endpoints_t)
        for i, (active, attached, queue) in enumerate(endpoints_t):
            endpoints[em[i]] = (active, c(attached), queue)
        entries, queues = mirror
        new_entries: list[Any] = [None] * self.cores
        new_queues: list[Any] = [None] * self.cores
        for old in range(self.cores):
            new_entries[perm[old]] = entries[old]._replace(endpoint=e(entries[old].endpoint))
            new_queues[perm[old]] = tuple(u._replace(endpoint=e(u.endpoint)) for u in queues[old])
        frozen = (
            tuple(cores), tuple(lines), tuple(endpoints), kernel_queue,
            (tuple(new_entries), tuple(new_queues)),
            tuple(sorted((rid, e(eid)) for rid, eid in reserved)),
            requests,
        )
        pending = tuple(sorted(
            ev._replace(core=c(ev.core),
                        line=e(ev.line) if ev.kind == EventKind.SWITCH_DONE else l(ev.line))
            for ev in node.pending
        ))
        return Node(frozen, pending, node.env)


# -- exploration --------------------------------------------------------------

class Explorer:
    """Breadth-first exploration over one bounded configuration.

    Args:
        config: Bounds, permuted categories and environment budgets
        cost: Cost model of the machine (only line layout matters untimed)
    """

    def __init__(self, config: CheckerConfig, cost: CostModel | None = None) -> None:
        self.config = config
        self.cost = cost or CostModel()
        self.permute = frozenset(config.permute)
        self.requests = checker_requests(config)
        self._local = threading.local()
        template = build_checker_machine(config, self.cost)
        self.symmetry = CoreSymmetry(template) if config.symmetry and config.cores > 1 else None

    def _machine(self) -> Machine:
        m = getattr(self._local, "machine", None)
        if m is None:
            m = build_checker_machine(self.config, self.cost)
            self._local.machine = m
        return m

    def _immediate(self, event: Event) -> bool:
        cat = category(event)
        return cat is None or (cat not in self.permute and cat != "timeout")

    def _settle(self, m: Machine, pending: list[Event], fired: list[Event]) -> None:
        while True:
            index = next((i for i, e in enumerate(pending) if self._immediate(e)), None)
            if index is None:
                return
            event = pending.pop(index)
            fired.append(event)
            m.fire(event)
            pending.extend(e for _, e in m.take_outbox())

    @staticmethod
    def _prune(m: Machine, pending: list[Event]) -> tuple[Event, ...]:
        """Drop timers whose load is gone and collapse duplicate timers."""
        kept: list[Event] = []
        timers: set[tuple[int, int]] = set()
        for event in pending:
            if event.kind == EventKind.TIMEOUT:
                load = m.lines[event.line].pending
                if load is None or load.core != event.core or (event.core, event.line) in timers:
                    continue
                timers.add((event.core, event.line))
            kept.append(event)
        return tuple(sorted(kept))

    def initial(self) -> Node:
        m = build_checker_machine(self.config, self.cost)
        m.boot()
        pending = [e for _, e in m.take_outbox()]
        self._settle(m, pending, [])
        return Node(m.freeze(), self._prune(m, pending), (0, 0, 0))

    def choices(self, node: Node) -> list[Event]:
        """Enabled moves from ``node``, deduplicated, in a fixed order."""
        m = self._machine()
        m.load_state(node.frozen)
        moves: list[Event] = []
        others = [e for e in node.pending if e.kind != EventKind.TIMEOUT]
        for event in node.pending:
            if category(event) in self.permute and event not in moves:
                moves.append(event)
        timeouts = [e for e in node.pending if e.kind == EventKind.TIMEOUT]
        if timeouts and "timeout" not in self.permute and not others:
            moves.append(timeouts[0])

        next_packet, preempts, retires = node.env
        if next_packet < len(self.requests) and ("arrival" in self.permute or not others):
            moves.append(Event(EventKind.ARRIVAL, request=self.requests[next_packet].request_id))
        if self.config.enable_preemption and preempts < self.config.max_preemptions:
            for core in m.cores:
                if core.ring == Ring.USER and not core.pending_ipi:
                    moves.append(Event(EventKind.PREEMPT, core.core_id))
        if self.config.enable_retire:
            if retires < self.config.max_retires:
                for core_id in nic.stalled_dispatchers(m):
                    moves.append(Event(EventKind.RETIRE, core_id))
            for core in m.cores:
                if core.mode == CoreMode.IDLE:
                    moves.append(Event(EventKind.REJOIN, core.core_id))
        return moves

    def step(self, node: Node, choice: Event) -> _Edge:
        """Fire ``choice`` from ``node`` and settle the immediate events."""
        m = self._machine()
        m.load_state(node.frozen)
        m.outbox.clear()
        pending = list(node.pending)
        next_packet, preempts, retires = node.env
        if choice.kind == EventKind.ARRIVAL:
            next_packet += 1
        elif choice.kind == EventKind.PREEMPT:
            preempts += 1
        elif choice.kind == EventKind.RETIRE:
            retires += 1
        elif choice.kind not in ENV_KINDS:
            pending.remove(choice)

        fired = [choice]
        try:
            m.fire(choice)
            pending.extend(e for _, e in m.take_outbox())
            self._settle(m, pending, fired)
        except ProtocolViolation as e:
            return _Edge(None, tuple(fired), (e.prop, str(e)))
        kept = self._prune(m, pending)
        child = Node(m.freeze(), kept, (next_packet, preempts, retires))
        return _Edge(child, tuple(fired), check_state(m, kept))

    def expand(self, node: Node, key: Node | None = None) -> tuple[list[_Edge], tuple[str, str] | None]:
        """All edges out of ``node``, plus the terminal-state problem if it is terminal.

        Each edge carries the canonical key of its child, computed once here.
        """
        if key is None:
            key = self.key(node)
        edges = []
        for choice in self.choices(node):
            edge = self.step(node, choice)
            if edge.child is not None:
                edge = edge._replace(key=self.key(edge.child))
            edges.append(edge)
        terminal = all(edge.problem is None and edge.key == key for edge in edges)
        problem = None
        if terminal:
            m = self._machine()
            m.load_state(node.frozen)
            problem = check_terminal(m) or ("terminal", "")
        return edges, problem

    def key(self, node: Node) -> Node:
        return self.symmetry.canonical(node) if self.symmetry else node

    def explore(self) -> CheckResult:
        """Breadth-first closure; counterexamples are shortest traces.

        Raises:
            StateBoundExceeded: If more than ``max_states`` states are reached
        """
        result = CheckResult()
        root = self.initial()
        root_key = self.key(root)
        parents: dict[Node, tuple[Node, tuple[Event, ...]] | None] = {root_key: None}
        frontier = [(root, root_key)]
        depth = 0

        def trace(key: Node, tail: tuple[Event, ...] = ()) -> tuple[Event, ...]:
            parts = [tail]
            link = parents[key]
            while link is not None:
                key, events = link
                parts.append(events)
                link = parents[key]
            return tuple(e for part in reversed(parts) for e in part)

        pool = ThreadPoolExecutor(max_workers=self.config.workers) if self.config.workers > 1 else None
        try:
            while frontier:
                if pool is not None:
                    expanded = list(pool.map(lambda item: self.expand(*item), frontier))
                else:
                    expanded = [self.expand(node, key) for node, key in frontier]
                next_frontier: list[tuple[Node, Node]] = []
                for (node, key), (edges, terminal) in zip(frontier, expanded):
                    if terminal is not None:
                        result.terminal_states += 1
                        if terminal[0] != "terminal":
                            result.violations.append(
                                Violation(terminal[0], terminal[1], trace(key), node.frozen))
                    for edge in edges:
                        result.transitions += 1
                        if edge.problem is not None:
                            state = edge.child.frozen if edge.child is not None else None
                            result.violations.append(
                                Violation(edge.problem[0], edge.problem[1],
                                          trace(key, edge.events), state))
                            continue
                        assert edge.child is not None and edge.key is not None
                        child_key = edge.key
                        if child_key in parents:
                            continue
                        parents[child_key] = (key, edge.events)
                        next_frontier.append((edge.child, child_key))
                        if len(parents) > self.config.max_states:
                            result.states_visited = len(parents)
                            result.max_depth = depth + 1
                            raise StateBoundExceeded(result, len(next_frontier))
                frontier = next_frontier
                if frontier:
                    depth += 1
                logger.debug("depth %d: %d states, frontier %d", depth, len(parents), len(frontier))
        finally:
            if pool is not None:
                pool.shutdown()

        result.states_visited = len(parents)
        result.max_depth = depth
        logger.info("explored %d states, %d transitions, %d violations",
                    result.states_visited, result.transitions, len(result.violations))
        return result


def explore(config: CheckerConfig, cost: CostModel | None = None) -> CheckResult:
    """Explore every permitted interleaving of ``config``."""
    return Explorer(config, cost).explore()


# -- replay -------------------------------------------------------------------

@dataclass
class ReplayResult:
    records: list[TraceRecord]
    frozen: tuple
    violation: tuple[str, str] | None = None
    terminal: tuple[str, str] | None = None  # what the final state breaks if nothing follows


def replay(
    config: CheckerConfig,
    events: Sequence[Event],
    cost: CostModel | None = None,
) -> ReplayResult:
    """Drive a fresh machine through a recorded event list.

    Every non-environment event must be in flight when it is replayed.

    Raises:
        SemanticsMismatch: If an event is not enabled or a violation occurs
            before the last event
    """
    m = build_checker_machine(config, cost, record_trace=True)
    m.boot()
    pending = [e for _, e in m.take_outbox()]
    for index, event in enumerate(events):
        if event.kind not in ENV_KINDS:
            if event not in pending:
                raise SemanticsMismatch(f"step {index}: {event.describe()} is not in flight")
            pending.remove(event)
        try:
            m.fire(event)
        except ProtocolViolation as e:
            if index != len(events) - 1:
                raise SemanticsMismatch(f"step {index}: unexpected violation: {e}") from e
            return ReplayResult(list(m.trace or []), m.freeze(), (e.prop, str(e)))
        pending.extend(e for _, e in m.take_outbox())
    return ReplayResult(list(m.trace or []), m.freeze(), check_state(m, pending), check_terminal(m))


def verify_violation(
    config: CheckerConfig,
    violation: Violation,
    cost: CostModel | None = None,
) -> ReplayResult:
    """Replay a counterexample and insist it ends where the checker said.

    Raises:
        SemanticsMismatch: If the replayed run diverges
    """
    result = replay(config, violation.events, cost)
    if violation.state is not None and result.frozen != violation.state:
        raise SemanticsMismatch(f"replay of {violation.prop} ended in a different state")
    found = {p[0] for p in (result.violation, result.terminal) if p is not None}
    if violation.state is None and violation.prop not in found:
        raise SemanticsMismatch(f"replay of {violation.prop} did not reproduce the violation")
    return result


# -- counterexample files -----------------------------------------------------

def event_to_dict(event: Event) -> dict[str, Any]:
    return {"kind": event.kind.name.lower(), "core": event.core, "line": event.line,
            "request": event.request, "arg": event.arg}


def event_from_dict(data: dict[str, Any]) -> Event:
    return Event(EventKind[data["kind"].upper()], data["core"], data["line"],
                 data["request"], data["arg"])


def write_violations(path: Path, settings: dict[str, Any], violations: Sequence[Violation]) -> None:
    """Counterexamples as JSON, with the experiment settings needed to replay them."""
    document = {
        "settings": settings,
        "violations": [
            {"prop": v.prop, "message": v.message, "events": [event_to_dict(e) for e in v.events]}
            for v in violations
        ],
    }
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")


def read_violations(path: Path) -> tuple[dict[str, Any], list[Violation]]:
    """Inverse of :func:`write_violations` (states are not stored).

    Raises:
        ValueError: If the file is not a counterexample document
    """
    try:
        document = json.loads(Path(path).read_text())
        violations = [
            Violation(v["prop"], v["message"], tuple(event_from_dict(e) for e in v["events"]))
            for v in document["violations"]
        ]
        return document["settings"], violations
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValueError(f"{path}: not a counterexample file: {e}") from e
