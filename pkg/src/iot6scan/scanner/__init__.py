"""Open-port and application-layer scan stages, socket layer and snapshots."""
from .net import Backpressure, BlockedTarget, SimulatedNetwork, SocketLayer
from .ratelimit import TokenBucket
from .snapshot import ScanSnapshot, SnapshotWriter, load_snapshot, persist_snapshot
from .stages import (
    AppScanConfig,
    Evidence,
    ProbeResult,
    ScanTarget,
    TlsFailed,
    app_scan,
    detect_max_tls_version,
    make_targets,
    port_scan,
    tls_capability_probe,
)

__all__ = [
    "AppScanConfig", "Backpressure", "BlockedTarget", "Evidence", "ProbeResult", "ScanSnapshot", "ScanTarget",
    "SimulatedNetwork", "SnapshotWriter", "SocketLayer", "TlsFailed", "TokenBucket", "app_scan",
    "detect_max_tls_version", "load_snapshot", "make_targets", "persist_snapshot", "port_scan",
    "tls_capability_probe",
]
