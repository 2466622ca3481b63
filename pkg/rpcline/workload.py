"""Synthetic RPC workloads.

Open-loop Poisson arrivals or closed-loop clients, Zipf service popularity and
a three-class argument size mix where small requests dominate. Every random
draw comes from a seeded PCG64 generator, so a WorkloadSpec and a seed fully determine
the request stream.
"""

from __future__ import annotations

import logging
import math
from typing import Iterator

import numpy as np

from .models import FlowKey, HandlerDistribution, RpcRequest, Service, WorkloadSpec
from .nic import service_port

logger = logging.getLogger(__name__)

CLIENT_ADDR_BASE = 0x0A00_0000
SERVER_ADDR = 0x0A01_0001
METHODS_PER_SERVICE = 4


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def build_services(spec: WorkloadSpec) -> list[Service]:
    """Services 0..service_count-1, weighted by Zipf popularity."""
    weights = zipf_weights(spec.service_count, spec.zipf_exponent)
    return [
        Service(service_id=s, handler_cycles=spec.handler, hotness_weight=float(weights[s]))
        for s in range(spec.service_count)
    ]


def zipf_weights(count: int, exponent: float) -> np.ndarray:
    """Normalized popularity of ranks 1..count, p(k) proportional to k**-exponent."""
    ranks = np.arange(1, count + 1, dtype=np.float64)
    weights = ranks ** -exponent
    return weights / weights.sum()


class _Sampler:
    """Draws the per-request attributes shared by both arrival processes."""

    def __init__(self, spec: WorkloadSpec, rng: np.random.Generator) -> None:
        self.spec = spec
        self.rng = rng
        self.weights = zipf_weights(spec.service_count, spec.zipf_exponent)

    def service(self) -> int:
        return int(self.rng.choice(self.spec.service_count, p=self.weights))

    def args_len(self) -> int:
        spec = self.spec
        u = self.rng.random()
        if u < spec.small_fraction:
            return int(self.rng.integers(0, spec.small_max + 1))
        if u < spec.small_fraction + spec.medium_fraction:
            return int(self.rng.integers(spec.small_max + 1, spec.medium_max + 1))
        return int(self.rng.integers(spec.medium_max + 1, spec.max_args_len + 1))

    def handler_cycles(self, handler: HandlerDistribution) -> int:
        if handler.kind == "constant" or handler.mean_cycles == 0:
            return handler.mean_cycles
        return math.ceil(self.rng.exponential(handler.mean_cycles))

    def request(self, request_id: int, arrival: int, client: int = -1) -> RpcRequest:
        service_id = self.service()
        source = client if client >= 0 else int(self.rng.integers(0, 1 << 16))
        flow = FlowKey(
            src_addr=CLIENT_ADDR_BASE + source,
            src_port=int(self.rng.integers(1024, 1 << 16)),
            dst_addr=SERVER_ADDR,
            dst_port=service_port(service_id),
        )
        return RpcRequest(
            request_id=request_id,
            flow_key=flow,
            service_id=service_id,
            method_id=int(self.rng.integers(0, METHODS_PER_SERVICE)),
            args_len=self.args_len(),
            arrival_time=arrival,
            handler_cycles=self.handler_cycles(self.spec.handler),
            client=client,
        )


def generate(spec: WorkloadSpec, seed: int) -> Iterator[RpcRequest]:
    """Open-loop Poisson request stream, sorted by arrival time.

    The arrival count over the window is Poisson(rate * duration) and arrival
    times are uniform over the window, which is the same process as
    exponential inter-arrival gaps.

    Args:
        spec: Workload description (``arrival`` must be "poisson")
        seed: Seed for the PCG64 generator

    Yields:
        RpcRequest with ids 0, 1, 2, ... in arrival order
    """
    if spec.arrival != "poisson":
        raise ValueError("generate() needs a poisson workload; use ClosedLoopClients")
    rng = make_rng(seed)
    mean = spec.rate_per_s * spec.duration_ns / 1e9
    count = int(rng.poisson(mean)) if mean > 0 and spec.duration_ns > 0 else 0
    if spec.max_requests:
        count = min(count, spec.max_requests)
    times = np.sort(rng.integers(0, spec.duration_ns, size=count)) if count else []
    logger.info("generated %d poisson arrivals over %d ns", count, spec.duration_ns)

    sampler = _Sampler(spec, rng)
    for request_id, arrival in enumerate(times):
        yield sampler.request(request_id, int(arrival))


class ClosedLoopClients:
    """Clients that each keep one request outstanding.

    A client issues its next request one think time after its previous
    response leaves the NIC. Each client draws from its own spawned stream so
    the order in which responses come back does not change what a client sends.
    """

    def __init__(self, spec: WorkloadSpec, seed: int) -> None:
        if spec.arrival != "closed":
            raise ValueError("ClosedLoopClients needs a closed-loop workload")
        self.spec = spec
        children = np.random.SeedSequence(seed).spawn(spec.clients)
        self._samplers = [
            _Sampler(spec, np.random.Generator(np.random.PCG64(child))) for child in children
        ]
        self._next_id = 0
        self.issued = 0

    def _think(self, client: int) -> int:
        mean = self.spec.think_time_ns
        return int(self._samplers[client].rng.exponential(mean)) if mean else 0

    def _issue(self, client: int, at: int) -> RpcRequest | None:
        if at >= self.spec.duration_ns:
            return None
        if self.spec.max_requests and self.issued >= self.spec.max_requests:
            return None
        request = self._samplers[client].request(self._next_id, at, client)
        self._next_id += 1
        self.issued += 1
        return request

    def start(self) -> list[RpcRequest]:
        """First request of every client, after one think time."""
        first = [self._issue(c, self._think(c)) for c in range(self.spec.clients)]
        return [r for r in first if r is not None]

    def next_after(self, completed: RpcRequest, now: int) -> RpcRequest | None:
        """The follow-up request of the client whose request just completed."""
        if completed.client < 0:
            return None
        return self._issue(completed.client, now + self._think(completed.client))
