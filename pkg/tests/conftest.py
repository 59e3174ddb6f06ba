import pytest

from trigsim.cluster import Cluster, PrestageSpec, RegionSpec, SimConfig
from trigsim.nic_cxi import CxiNic, NicParams
from trigsim.simcore import Engine, Fabric, MemoryRegion, MemorySpace


@pytest.fixture
def engine():
    return Engine(trace=True)


@pytest.fixture
def nic_pair(engine):
    """A NIC for rank 0 with a device flag region on rank 1 and a source buffer on rank 0."""
    fabric = Fabric(engine, wire_latency=1000)
    nic = CxiNic(engine, fabric, 0, NicParams(doorbell_latency_ns=0, nic_exec_latency_ns=0))
    src = MemoryRegion(0, MemorySpace.DEVICE, 8192, name="src")
    dst = MemoryRegion(1, MemorySpace.DEVICE, 8192, name="dst")
    return nic, src, dst


def triggered_put_cluster(programs, threshold=1, backend="ofi", **cfg):
    """Two ranks; rank 0 has a put src+0 -> rank1 flag+0 staged on counter c0."""
    config = SimConfig(backend=backend, ranks=2, trace=True, **cfg)
    prestage = [PrestageSpec(0, "c0", threshold, 1, ("src", 0), ("flag", 0), 8)]
    regions = [RegionSpec("src", MemorySpace.DEVICE, 64), RegionSpec("flag", MemorySpace.DEVICE, 64)]
    return Cluster(config, programs, prestage=prestage, regions=regions)
