"""Multi-rank spiking network simulation without construction-time
communication.

Every rank builds its own wiring from shared per-call random substreams,
keeps sorted maps of the remote sources it listens to, and exchanges only
map positions while the simulation runs.
"""

from .construction import ConnSpec, SynSpec
from .core import (
    POINT_TO_POINT,
    ArenaUnderflowError,
    ConsistencyError,
    DelayRangeError,
    ProtocolError,
    RngStream,
    SimConfig,
)
from .dynamics import LifParams, Raster
from .engine import Cluster, RunReport
from .transport import SpikePacket

__version__ = "0.1.0"

__all__ = [
    "ArenaUnderflowError",
    "Cluster",
    "ConnSpec",
    "ConsistencyError",
    "DelayRangeError",
    "LifParams",
    "POINT_TO_POINT",
    "ProtocolError",
    "Raster",
    "RngStream",
    "RunReport",
    "SimConfig",
    "SpikePacket",
    "SynSpec",
    "__version__",
]
