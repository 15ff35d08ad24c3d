"""meshflow: a message-driven task runtime with an adaptive-mesh wave solver.

The runtime layer provides cooperative lightweight tasks on a fixed worker
pool, event-driven synchronization cells (futures, dataflow joins,
semaphores, mutexes, full-empty bits), a global address space decoupling
object names from placement, and parcel-based active messages between
localities.  On top of it, the ``amr`` package evolves a 1+1D semilinear
wave equation with Berger-Oliger mesh refinement in either a global-barrier
or a barrier-free dataflow-gated stepping mode, and the harness reproduces
the runtime's measurable behaviors (thread overhead, grain-size sweeps,
timestep-front snapshots, barrier-removal comparisons) at desk scale.
"""

from .ids import (
    KIND_DATAFLOW,
    KIND_FE,
    KIND_FUTURE,
    KIND_GRID_BLOCK,
    KIND_MUTEX,
    KIND_OTHER,
    KIND_SEMAPHORE,
    KIND_TASK,
    format_gid,
    gid_kind,
    gid_locality,
    gid_sequence,
    make_gid,
)
from .runtime.locality import Locality, LocalityConfig
from .runtime.scheduler import (
    POLICY_GLOBAL,
    POLICY_LOCAL,
    QuiesceTimeoutError,
    RuntimeShutDownError,
    SchedulerConfig,
    TaskRuntime,
    WakeTokenReusedError,
)

__all__ = [
    "Locality",
    "LocalityConfig",
    "SchedulerConfig",
    "TaskRuntime",
    "POLICY_GLOBAL",
    "POLICY_LOCAL",
    "QuiesceTimeoutError",
    "RuntimeShutDownError",
    "WakeTokenReusedError",
    "format_gid",
    "make_gid",
    "gid_kind",
    "gid_locality",
    "gid_sequence",
    "KIND_TASK",
    "KIND_FUTURE",
    "KIND_DATAFLOW",
    "KIND_SEMAPHORE",
    "KIND_MUTEX",
    "KIND_FE",
    "KIND_GRID_BLOCK",
    "KIND_OTHER",
]

__version__ = "0.1.0"
