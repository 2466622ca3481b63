"""Data models for rpcline.

Contains the vocabulary shared by every module: time, requests, dispatch
records, cache lines, endpoints, cores, services and the cost model.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields
from enum import Enum, IntEnum
from typing import NamedTuple

# Simulated time is an integer number of nanoseconds.
SimTime = int

RECORD_HEADER_BYTES = 18  # code ptr (8) + data ptr (8) + args length (2)
NIC = -1  # holder/owner value meaning "the NIC"


class CostModelError(ValueError):
    """Raised when a cost model violates its invariants."""
    pass


class Ring(IntEnum):
    """Which dispatch loop a core belongs to."""
    NONE = 0
    KERNEL = 1
    USER = 2


class CoreMode(IntEnum):
    """What a core is doing right now."""
    IDLE = 0
    KERNEL_LOOP = 1
    USER_LOOP = 2
    STALLED = 3
    EXECUTING = 4
    CONTEXT_SWITCHING = 5


class Holder(IntEnum):
    """Coherence holder of a NIC-homed line."""
    NIC = 0
    SHARED = 1
    EXCLUSIVE = 2


class Content(IntEnum):
    """What a line currently carries."""
    EMPTY = 0
    RECORD = 1
    RESPONSE = 2
    TRY_AGAIN = 3
    RETIRE = 4


class MessageKind(str, Enum):
    LOAD = "load"
    FULFILL = "fulfill"
    TRY_AGAIN = "try_again"
    RETIRE = "retire"
    FETCH_EXCLUSIVE = "fetch_exclusive"


class Path(str, Enum):
    """How a request reached its handler."""
    FASTPATH = "fastpath"
    KERNEL_DISPATCH = "kernel_dispatch"
    QUEUED = "queued"
    DMA = "dma"
    DROPPED = "dropped"
    BASELINE_INTERRUPT = "baseline-interrupt"
    BASELINE_BYPASS = "baseline-bypass"


class NicModel(str, Enum):
    """NIC designs that can be simulated."""
    COHERENT = "coherent"
    BASELINE_INTERRUPT = "baseline-interrupt"
    BASELINE_BYPASS = "baseline-bypass"


class RequestStatus(IntEnum):
    PENDING = 0      # not yet injected (checker only)
    IN_NIC = 1       # decoded or queued, not yet delivered to a core
    DELIVERED = 2    # a core owns it
    COMPLETED = 3
    DROPPED = 4


class FlowKey(NamedTuple):
    src_addr: int
    src_port: int
    dst_addr: int
    dst_port: int


@dataclass(frozen=True)
class RpcRequest:
    """An RPC request as it arrives at the NIC.

    Attributes:
        request_id: Unique per run
        flow_key: Source/destination address and port tuple
        service_id: Target service (demultiplexed from the flow)
        method_id: Method within the service
        args_len: Argument bytes carried by the request
        arrival_time: When the packet was fully received, in ns
        handler_cycles: CPU demand of the handler for this request
        client: Closed-loop client that issued it, -1 for open loop
    """
    request_id: int
    flow_key: FlowKey
    service_id: int
    method_id: int
    args_len: int
    arrival_time: SimTime
    handler_cycles: int = 0
    client: int = -1

    def __post_init__(self) -> None:
        if self.args_len < 0:
            raise ValueError(f"args_len must be >= 0, got {self.args_len}")


@dataclass(frozen=True)
class DispatchRecord:
    """The minimal unmarshalled unit the NIC delivers into a core's cache.

    Attributes:
        code_ptr: Virtual address of the first handler instruction
        data_ptr: Virtual address of the handler's data
        args_len: Total argument bytes
        inline_args: Argument bytes carried in the CONTROL line
        aux_count: Number of AUXILIARY lines holding the remaining bytes
        lines: Encoded line images (CONTROL first)
    """
    code_ptr: int
    data_ptr: int
    args_len: int
    inline_args: bytes
    aux_count: int
    lines: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class ProtocolMessage:
    """One NIC<->CPU coherence message, as recorded in the protocol trace."""
    kind: MessageKind
    line_id: int
    core: int = -1
    request_id: int = -1

    def __post_init__(self) -> None:
        if self.kind in (MessageKind.TRY_AGAIN, MessageKind.RETIRE) and self.request_id != -1:
            raise ValueError(f"{self.kind.value} carries no payload")


@dataclass(frozen=True)
class PendingLoad:
    """A stalled load on a CONTROL line."""
    core: int
    issue_time: SimTime
    deadline: SimTime


@dataclass
class LineState:
    """Coherence state of one NIC-homed cache line."""
    line_id: int
    endpoint_id: int
    holder: Holder = Holder.NIC
    holder_core: int = NIC
    pending: PendingLoad | None = None
    content: Content = Content.EMPTY
    content_request: int = -1


@dataclass
class Endpoint:
    """Two CONTROL lines plus AUXILIARY lines homed on the NIC.

    Attributes:
        endpoint_id: Index into the machine's endpoint table
        owner_process: Service the endpoint belongs to, -1 for a kernel endpoint
        mode: "kernel" or "user"
        control_lines: The alternating CONTROL pair
        aux_lines: Overflow lines for large arguments
        active_index: Which CONTROL line the next request goes to
        attached_core: Core the NIC considers bound to this endpoint
        queue: Request ids waiting for the next load on this endpoint
    """
    endpoint_id: int
    owner_process: int
    mode: str
    control_lines: tuple[int, int]
    aux_lines: tuple[int, ...] = ()
    active_index: int = 0
    attached_core: int = -1
    queue: deque[int] = field(default_factory=deque)

    def __post_init__(self) -> None:
        if len(self.control_lines) != 2:
            raise ValueError("an endpoint has exactly two control lines")
        if set(self.control_lines) & set(self.aux_lines):
            raise ValueError("control and auxiliary lines must be disjoint")

    @property
    def active_line(self) -> int:
        return self.control_lines[self.active_index]

    @property
    def is_kernel(self) -> bool:
        return self.mode == "kernel"


@dataclass
class CoreState:
    """Ground-truth state of one CPU core.

    ``line`` is the line a stalled core waits on, or the line the request it is
    executing was delivered on. ``exclusive`` holds lines carrying responses the
    NIC has not fetched yet; ``fetching`` the subset whose fetch is in flight.
    """
    core_id: int
    mode: CoreMode = CoreMode.IDLE
    ring: Ring = Ring.NONE
    process: int = -1
    endpoint: int = -1
    line: int = -1
    request: int = -1
    pending_ipi: bool = False
    yield_requested: bool = False
    exclusive: frozenset[int] = frozenset()
    fetching: frozenset[int] = frozenset()
    last_process: int = -1
    last_fulfilled: SimTime = 0
    last_schedule: SimTime = 0


@dataclass(frozen=True)
class HandlerDistribution:
    """Per-request handler demand in cycles."""
    kind: str = "exponential"  # constant|exponential
    mean_cycles: int = 2000

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "exponential"):
            raise ValueError(f"Unknown handler distribution: {self.kind}")
        if self.mean_cycles < 0:
            raise ValueError("handler cycles must be >= 0")


@dataclass(frozen=True)
class Service:
    """An RPC service (one process) and its user endpoints."""
    service_id: int
    handler_cycles: HandlerDistribution = HandlerDistribution()
    endpoints: tuple[int, ...] = ()
    hotness_weight: float = 1.0


@dataclass(frozen=True)
class RebalanceRequest:
    """NIC suggestion to move cores between services.

    ``delta_cores`` > 0 grows ``service`` taking a core from ``donor``
    (a service id, or -1 for a retired idle core); < 0 shrinks ``service``.
    """
    service: int
    delta_cores: int
    donor: int = -1


@dataclass(frozen=True)
class CostModel:
    """Per-step latencies for both NIC designs, in nanoseconds.

    Steps follow the classic receive path: 1-3 packet read, protocol and
    demultiplex; 4 interrupt; 5 kernel protocol processing; 6 process lookup;
    7 core selection; 8 schedule; 9 context switch; 10 unmarshal; 11 function
    lookup; 12 jump.
    """
    line_size: int = 128
    coherent_line_roundtrip: int = 500
    dma_write: int = 900
    descriptor_fetch: int = 700
    interrupt_delivery: int = 1500
    kernel_proto_processing: int = 800
    process_lookup: int = 200
    core_selection: int = 150
    schedule_cost: int = 400
    context_switch: int = 1200
    unmarshal_fixed: int = 300
    unmarshal_per_byte: int = 1
    fn_lookup: int = 50
    jump_cost: int = 2
    nic_pipeline: int = 500
    try_again_timeout: int = 15_000_000
    dma_threshold: int = 4096
    core_freq_mhz: int = 2000

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise CostModelError(f"{f.name} must be an integer, got {value!r}")
            if value < 0:
                raise CostModelError(f"{f.name} must be >= 0, got {value}")
        if self.line_size <= RECORD_HEADER_BYTES:
            raise CostModelError(f"line_size must exceed {RECORD_HEADER_BYTES} bytes")
        if self.interrupt_delivery <= 0:
            raise CostModelError("interrupt_delivery must be > 0")
        if self.try_again_timeout <= 0:
            raise CostModelError("try_again_timeout must be > 0")
        if self.core_freq_mhz <= 0:
            raise CostModelError("core_freq_mhz must be > 0")
        if self.dma_threshold >= 1 << 16:
            raise CostModelError("dma_threshold must fit the 2-byte length field")
        if self.coherent_line_roundtrip >= self.dma_write + self.descriptor_fetch:
            raise CostModelError(
                "coherent_line_roundtrip must be below the DMA round trip "
                f"({self.coherent_line_roundtrip} >= "
                f"{self.dma_write} + {self.descriptor_fetch})"
            )

    @property
    def inline_capacity(self) -> int:
        return self.line_size - RECORD_HEADER_BYTES

    def aux_count(self, args_len: int) -> int:
        """AUXILIARY lines needed for ``args_len`` argument bytes."""
        overflow = max(0, args_len - self.inline_capacity)
        return -(-overflow // self.line_size)

    def default_aux_lines(self) -> int:
        """Smallest per-endpoint AUXILIARY count that fits every line-protocol record."""
        return self.aux_count(self.dma_threshold - 1)

    def cycles(self, ns: int) -> int:
        return ns * self.core_freq_mhz // 1000

    def cycles_to_ns(self, cycles: int) -> int:
        return -(-cycles * 1000 // self.core_freq_mhz)

    def unmarshal(self, args_len: int) -> int:
        return self.unmarshal_fixed + self.unmarshal_per_byte * args_len

    def software_dispatch(self, args_len: int) -> int:
        """Steps 10-12 done in software."""
        return self.unmarshal(args_len) + self.fn_lookup + self.jump_cost

    def kernel_steps(self, args_len: int, switch: bool = True) -> int:
        """Steps 5-12 done in software on an interrupted core."""
        total = (
            self.kernel_proto_processing
            + self.process_lookup
            + self.core_selection
            + self.schedule_cost
            + self.software_dispatch(args_len)
        )
        if switch:
            total += self.context_switch
        return total


@dataclass(frozen=True)
class TraceRecord:
    """One line of the event trace."""
    time: SimTime
    kind: str
    core: int = -1
    line: int = -1
    request_id: int = -1

    def as_row(self) -> str:
        return f"{self.time}\t{self.kind}\t{self.core}\t{self.line}\t{self.request_id}"


@dataclass(frozen=True)
class NicConfig:
    """NIC datapath knobs.

    Attributes:
        endpoints_per_service: User endpoints the OS installs per service
        aux_lines: AUXILIARY lines per endpoint (None derives from the cost model)
        hi_watermark: Service or kernel queue depth above which a service asks for a core
        lo_watermark: Arrivals at or below which a service counts as idle
        window_ns: Statistics window and rebalance tick period
        idle_windows: Windows a service must stay at or below lo_watermark before it gives a core back
        rebalance: Whether the NIC emits rebalance requests
        kernel_queue_limit: Software queue bound, 0 for unbounded
        steal_depth: Endpoint backlog an idle dispatcher may take from, 0 disables
        fulfill_before_fetch: Seeded ordering bug, never enable outside checks
    """
    endpoints_per_service: int = 2
    aux_lines: int | None = None
    hi_watermark: int = 16
    lo_watermark: int = 0
    window_ns: int = 100_000
    idle_windows: int = 10
    rebalance: bool = True
    kernel_queue_limit: int = 0
    steal_depth: int = 2
    fulfill_before_fetch: bool = False

    def __post_init__(self) -> None:
        if self.endpoints_per_service < 1:
            raise ValueError("endpoints_per_service must be >= 1")
        if self.aux_lines is not None and self.aux_lines < 0:
            raise ValueError("aux_lines must be >= 0")
        if self.lo_watermark < 0 or self.hi_watermark < self.lo_watermark:
            raise ValueError("watermarks must satisfy 0 <= lo <= hi")
        if self.window_ns <= 0:
            raise ValueError("window_ns must be > 0")
        if self.idle_windows < 1:
            raise ValueError("idle_windows must be >= 1")
        if self.kernel_queue_limit < 0 or self.steal_depth < 0:
            raise ValueError("kernel_queue_limit and steal_depth must be >= 0")


@dataclass(frozen=True)
class SchedulerConfig:
    """OS scheduler model knobs.

    Attributes:
        schedule_period_ns: Minimum gap between schedule() runs on a dispatcher
        scale_out: Let a dispatcher enter a process already running elsewhere
        non_preemptive: Rebalance never sends IPIs; it retires dispatchers and
            asks user loops to yield
        ipi_origin: "os" or "nic"
        yield_on_try_again: User loops give the core back after an idle timeout
        warm_start: Boot with core i already in the user loop of service i
    """
    schedule_period_ns: int = 1_000_000
    scale_out: bool = True
    non_preemptive: bool = False
    ipi_origin: str = "os"
    yield_on_try_again: bool = True
    warm_start: bool = False

    def __post_init__(self) -> None:
        if self.schedule_period_ns < 0:
            raise ValueError("schedule_period_ns must be >= 0")
        if self.ipi_origin not in ("os", "nic"):
            raise ValueError(f"ipi_origin must be 'os' or 'nic', got {self.ipi_origin!r}")


@dataclass(frozen=True)
class BaselineConfig:
    """Descriptor-ring NIC knobs."""
    ring_depth: int = 256

    def __post_init__(self) -> None:
        if self.ring_depth < 1:
            raise ValueError("ring_depth must be >= 1")


@dataclass(frozen=True)
class WorkloadSpec:
    """Synthetic workload description.

    Attributes:
        seed: Overrides the experiment seed when set
        duration_ns: Arrival window
        arrival: "poisson" (open loop) or "closed"
        rate_per_s: Poisson arrival rate
        clients: Closed-loop client count
        think_time_ns: Mean closed-loop think time
        service_count: Number of services
        zipf_exponent: Service popularity skew (0 = uniform)
        small_fraction: Share of requests with args <= small_max
        medium_fraction: Share with small_max < args <= medium_max
        small_max: Upper bound of the small class, bytes
        medium_max: Upper bound of the medium class, bytes
        max_args_len: Upper bound of the large class, bytes
        core_count: Cores in the simulated machine
        handler: Handler demand distribution shared by all services
        max_requests: Stop after this many requests, 0 for no cap
    """
    seed: int | None = None
    duration_ns: int = 10_000_000
    arrival: str = "poisson"
    rate_per_s: float = 500_000.0
    clients: int = 64
    think_time_ns: int = 20_000
    service_count: int = 32
    zipf_exponent: float = 1.2
    small_fraction: float = 0.9
    medium_fraction: float = 0.09
    small_max: int = 128
    medium_max: int = 1024
    max_args_len: int = 8192
    core_count: int = 48
    handler: HandlerDistribution = HandlerDistribution()
    max_requests: int = 0

    def __post_init__(self) -> None:
        if self.arrival not in ("poisson", "closed"):
            raise ValueError(f"Unknown arrival process: {self.arrival}")
        for name in ("duration_ns", "rate_per_s", "clients", "think_time_ns",
                     "zipf_exponent", "max_requests"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.service_count < 1 or self.core_count < 1:
            raise ValueError("service_count and core_count must be >= 1")
        if not 0 <= self.small_fraction + self.medium_fraction <= 1:
            raise ValueError("size class fractions must sum to at most 1")
        if min(self.small_fraction, self.medium_fraction) < 0:
            raise ValueError("size class fractions must be >= 0")
        if not 0 <= self.small_max <= self.medium_max <= self.max_args_len:
            raise ValueError("size bounds must satisfy small <= medium <= max")


CHECKER_CATEGORIES = ("arrival", "load", "ipi", "timeout", "mirror")


@dataclass(frozen=True)
class CheckerConfig:
    """Bounded configuration for exhaustive exploration.

    Attributes:
        cores: 1-3
        endpoints: Services with one user endpoint each, 1-2
        packets: Requests injected, 1-4
        enable_preemption: Environment may preempt user loops
        enable_retire: Environment may retire stalled dispatchers
        permute: Event categories whose order is explored
        max_states: Bound on visited states
        max_preemptions: Preemption budget per run
        max_retires: Retire budget per run
        symmetry: Canonicalize states up to core renaming
        workers: Threads expanding the frontier
        fulfill_before_fetch: Seed the ordering bug
        scale_out: Scheduler scale-out policy
        yield_on_try_again: Scheduler idle-yield policy
    """
    cores: int = 1
    endpoints: int = 1
    packets: int = 1
    enable_preemption: bool = False
    enable_retire: bool = False
    permute: tuple[str, ...] = CHECKER_CATEGORIES
    max_states: int = 10_000_000
    max_preemptions: int = 1
    max_retires: int = 1
    symmetry: bool = False
    workers: int = 1
    fulfill_before_fetch: bool = False
    scale_out: bool = True
    yield_on_try_again: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.cores <= 3:
            raise ValueError("checker cores must be 1-3")
        if not 1 <= self.endpoints <= 2:
            raise ValueError("checker endpoints must be 1-2")
        if not 1 <= self.packets <= 4:
            raise ValueError("checker packets must be 1-4")
        unknown = set(self.permute) - set(CHECKER_CATEGORIES)
        if unknown:
            raise ValueError(f"Unknown event categories: {sorted(unknown)}")
        if self.max_states < 1 or self.workers < 1:
            raise ValueError("max_states and workers must be >= 1")
        if self.max_preemptions < 0 or self.max_retires < 0:
            raise ValueError("budgets must be >= 0")


@dataclass(frozen=True)
class OutputConfig:
    """Where and what to write."""
    out_dir: str = "out"
    trace: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs."""
    seed: int = 1
    model: NicModel = NicModel.COHERENT
    cost_model: CostModel = CostModel()
    workload: WorkloadSpec = WorkloadSpec()
    nic: NicConfig = NicConfig()
    scheduler: SchedulerConfig = SchedulerConfig()
    baseline: BaselineConfig = BaselineConfig()
    checker: CheckerConfig = CheckerConfig()
    output: OutputConfig = OutputConfig()
    drain_ns: int = 1_000_000_000

    @property
    def workload_seed(self) -> int:
        return self.seed if self.workload.seed is None else self.workload.seed
