"""Deterministic simulator of GPU-triggered and GPU-initiated coordination.

Typical use goes through :class:`Cluster` (build a topology from device
programs, run it, inspect the trace) or through the ``trigsim`` command.
"""

from .cluster import Cluster, PrestageSpec, RegionSpec, RunResult, SimConfig, simulate
from .coordination import AmLayout, DisseminationSchedule, Mailbox, MailboxFull
from .device import (
    Addr,
    AmPollDispatch,
    AmRecv,
    AmSend,
    BarrierAll,
    Cmp,
    Compute,
    DeviceActor,
    Halo,
    IbPut,
    Quiet,
    Trigger,
    WaitUntil,
    Write,
)
from .host_runtime import HandoffViolation, HostMonitor, MonitorConfig
from .nic_cxi import CounterOverflow, CxiNic, DwqFull, NicParams, max_prestaged_barriers
from .nic_ib import IbNic, IbParams
from .simcore import Engine, EngineStatus, MemoryRegion, MemorySpace, SimError, SimFault, Trace, ms, us
from .workloads import CostModel, exhaustion_study, jacobi_weak_scaling, phase_benchmark

__version__ = "0.1.0"

__all__ = [
    "Cluster", "PrestageSpec", "RegionSpec", "RunResult", "SimConfig", "simulate",
    "AmLayout", "DisseminationSchedule", "Mailbox", "MailboxFull",
    "Addr", "AmPollDispatch", "AmRecv", "AmSend", "BarrierAll", "Cmp", "Compute", "DeviceActor", "Halo",
    "IbPut", "Quiet", "Trigger", "WaitUntil", "Write",
    "HandoffViolation", "HostMonitor", "MonitorConfig",
    "CounterOverflow", "CxiNic", "DwqFull", "NicParams", "max_prestaged_barriers",
    "IbNic", "IbParams",
    "Engine", "EngineStatus", "MemoryRegion", "MemorySpace", "SimError", "SimFault", "Trace", "ms", "us",
    "CostModel", "exhaustion_study", "jacobi_weak_scaling", "phase_benchmark",
]
