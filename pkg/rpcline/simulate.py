"""Timed discrete-event simulation.

The ``Simulator`` drives any machine with the ``fire``/``take_outbox``
interface from a heap ordered by (time, insertion sequence), so two events at
the same nanosecond always fire in the order they were scheduled.
``run_experiment`` wires a config, a workload and a NIC model together and
turns the finished machine into ``RunMetrics``.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

from .baseline import BaselineMachine
from .machine import Machine
from .metrics import RunMetrics, check_conservation, path_fractions, summarize
from .models import (
    ExperimentConfig,
    NicModel,
    Path,
    RequestStatus,
    RpcRequest,
    Service,
    TraceRecord,
)
from .storage import workload_hash
from .workload import ClosedLoopClients, build_services, generate

logger = logging.getLogger(__name__)

AnyMachine = Machine | BaselineMachine

VERIFY_EVERY = 4096


class Simulator:
    """Event loop over one machine.

    Args:
        machine: ``Machine`` or ``BaselineMachine``
        horizon_ns: Nothing fires after this time
        stop_when_idle: Stop once no arrival is left and nothing is in flight
    """

    def __init__(self, machine: AnyMachine, horizon_ns: int, stop_when_idle: bool = True) -> None:
        self.machine = machine
        self.horizon_ns = horizon_ns
        self.stop_when_idle = stop_when_idle
        self.admitted: list[RpcRequest] = []
        self.events_fired = 0
        self._heap: list[tuple[int, int, Any, bool]] = []
        self._seq = 0
        self._feed: Iterator[RpcRequest] | None = None
        self._pending_arrivals = 0

    def schedule(self, time: int, event: Any, arrival: bool = False) -> None:
        """Push an event; also used to inject environment events (PREEMPT, ...)."""
        if time < self.machine.now:
            raise ValueError(f"cannot schedule at {time}, now is {self.machine.now}")
        heapq.heappush(self._heap, (time, self._seq, event, arrival))
        self._seq += 1
        if arrival:
            self._pending_arrivals += 1

    def inject(self, request: RpcRequest) -> None:
        """Admit a request and schedule its arrival."""
        self.machine.admit(request)
        self.admitted.append(request)
        self.schedule(request.arrival_time, self.machine.arrival_event(request.request_id), True)

    def feed(self, requests: Iterable[RpcRequest]) -> None:
        """Arrivals are pulled from ``requests`` one at a time, in order."""
        self._feed = iter(requests)
        self._pull()

    def _pull(self) -> None:
        if self._feed is None:
            return
        request = next(self._feed, None)
        if request is None:
            self._feed = None
            return
        self.inject(request)

    def _drain_outbox(self, now: int) -> None:
        for delay, event in self.machine.take_outbox():
            self.schedule(now + delay, event)

    def idle(self) -> bool:
        return self._feed is None and self._pending_arrivals == 0 and not self.machine.active()

    def run(self) -> int:
        """Boot the machine and fire events until done; returns the end time."""
        m = self.machine
        m.boot()
        self._drain_outbox(m.now)
        while self._heap and not (self.stop_when_idle and self.idle()):
            time, _, event, arrival = heapq.heappop(self._heap)
            if time > self.horizon_ns:
                logger.info("horizon %d ns reached with events pending", self.horizon_ns)
                break
            m.now = time
            m.fire(event)
            self._drain_outbox(time)
            self.events_fired += 1
            if arrival:
                self._pending_arrivals -= 1
                self._pull()
            if self.events_fired % VERIFY_EVERY == 0:
                m.verify()
        m.verify()
        return m.now


@dataclass
class SimulationResult:
    """A finished run."""
    config: ExperimentConfig
    machine: AnyMachine
    metrics: RunMetrics
    requests: list[RpcRequest]
    end_time: int
    events_fired: int
    trace: list[TraceRecord] = field(default_factory=list)


def build_machine(
    config: ExperimentConfig,
    services: Sequence[Service],
    record_trace: bool = False,
) -> AnyMachine:
    """The NIC model the config selects."""
    spec = config.workload
    if config.model == NicModel.COHERENT:
        return Machine(
            config.cost_model,
            config.nic,
            config.scheduler,
            spec.core_count,
            services,
            record_trace=record_trace,
        )
    return BaselineMachine(
        config.cost_model,
        config.baseline,
        spec.core_count,
        services,
        bypass=config.model == NicModel.BASELINE_BYPASS,
        record_trace=record_trace,
    )


def warmup_cutoff(requests: Sequence[RpcRequest], fraction: float) -> int:
    """Arrival time before which the first ``fraction`` of requests arrived."""
    if not requests or fraction <= 0:
        return 0
    index = min(int(len(requests) * fraction), len(requests) - 1)
    return sorted(r.arrival_time for r in requests)[index]


def collect_metrics(
    config: ExperimentConfig,
    machine: AnyMachine,
    requests: Sequence[RpcRequest],
    end_time: int,
    warmup_fraction: float = 0.0,
) -> RunMetrics:
    """Summarize a finished machine and check request conservation.

    Raises:
        ConservationError: If a request was lost or answered twice
    """
    statuses = list(machine.status.values())
    arrivals = sum(1 for s in statuses if s != RequestStatus.PENDING)
    completed = statuses.count(RequestStatus.COMPLETED)
    dropped = statuses.count(RequestStatus.DROPPED)
    check_conservation(
        arrivals,
        completed,
        dropped,
        in_flight=machine.outstanding,
        duplicates=machine.counters["duplicate_response"],
    )

    ledgers = list(machine.ledgers.values()) if machine.ledgers is not None else []
    skip = warmup_cutoff(requests, warmup_fraction)
    cost = config.cost_model
    rows = summarize(
        ledgers,
        cost,
        drops=dropped,
        spin_cycles=cost.cycles(machine.spin_ns(end_time)),
        spin_path=Path.BASELINE_BYPASS.value,
        skip_before=skip,
    )
    return RunMetrics(
        model=config.model.value,
        seed=config.seed,
        workload_hash=workload_hash(requests),
        sim_time_ns=end_time,
        arrivals=arrivals,
        completed=completed,
        dropped=dropped,
        rows=rows,
        in_flight=machine.outstanding,
        counters=dict(sorted(machine.counters.items())),
        fractions=path_fractions(ledgers, skip),
    )


def run_experiment(
    config: ExperimentConfig,
    requests: Iterable[RpcRequest] | None = None,
    record_trace: bool | None = None,
    warmup_fraction: float = 0.0,
) -> SimulationResult:
    """Run one experiment to completion.

    Args:
        config: Experiment configuration
        requests: Explicit request stream (imported workload); generated from
            ``config.workload`` when None
        record_trace: Keep the event trace (defaults to ``config.output.trace``)
        warmup_fraction: Share of earliest requests left out of the report rows

    Returns:
        SimulationResult with metrics and, if recorded, the trace
    """
    spec = config.workload
    if record_trace is None:
        record_trace = config.output.trace
    services = build_services(spec)
    machine = build_machine(config, services, record_trace)
    sim = Simulator(machine, spec.duration_ns + config.drain_ns)

    if requests is not None:
        sim.feed(requests)
    elif spec.arrival == "poisson":
        sim.feed(generate(spec, config.workload_seed))
    else:
        clients = ClosedLoopClients(spec, config.workload_seed)

        def follow_up(done: RpcRequest) -> None:
            request = clients.next_after(done, machine.now)
            if request is not None:
                sim.inject(request)

        machine.on_complete = follow_up
        for request in clients.start():
            sim.inject(request)

    logger.info("simulating %s, seed %d", config.model.value, config.seed)
    end = sim.run()
    metrics = collect_metrics(config, machine, sim.admitted, end, warmup_fraction)
    logger.info("%s: %d completed, %d dropped, %d events",
                config.model.value, metrics.completed, metrics.dropped, sim.events_fired)
    return SimulationResult(
        config=config,
        machine=machine,
        metrics=metrics,
        requests=sim.admitted,
        end_time=end,
        events_fired=sim.events_fired,
        trace=list(machine.trace or []),
    )
