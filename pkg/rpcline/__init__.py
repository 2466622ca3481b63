"""rpcline - NIC-driven RPC dispatch over cache-coherent lines.

A deterministic discrete-event simulator and explicit-state model checker for
a NIC that delivers ready-to-run RPC calls straight into CPU cache lines,
compared against a descriptor-ring DMA NIC with interrupts or busy polling.
"""

__version__ = "0.1.0"
__author__ = "rpcline"

from .models import CostModel, ExperimentConfig, NicModel, RpcRequest

__all__ = [
    "__version__",
    "CostModel",
    "ExperimentConfig",
    "NicModel",
    "RpcRequest",
]
