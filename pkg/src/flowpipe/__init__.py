"""flowpipe: parallel and distributed data-processing pipelines.

Worker functions compose into chains, chains become pipers (nodes of a
DAG), pipers share executors (pools of local and remote lanes), and
input streams traverse the graph in stride-sized batches with fault
placeholders instead of crashes.
"""

from . import errors, log
from .codec import BIN_V1, TEXT_V1, get_codec
from .dag import Dag, NodeId
from .envelope import Envelope, FaultInfo, payload
from .executor import (
    END_OF_STREAM,
    DispatchRecord,
    Executor,
    ExecutorConfig,
    TaskHandle,
    WorkUnit,
    create_executor,
)
from .ipc import Locator, dump_item, load_item, reap_expired
from .manifest import load_manifest, save_manifest
from .pipeline import Pipeline, PiperSpec, RunState, RunStats, ValidationReport
from .remote import RemoteSlotPool, WorkerServer, connect, serve
from .worker import (
    FunctionRef,
    WorkerChain,
    WorkerRegistry,
    apply_chain,
    compose_chain,
    default_registry,
    register_function,
)

__version__ = "0.1.0"

__all__ = [
    "BIN_V1",
    "Dag",
    "DispatchRecord",
    "END_OF_STREAM",
    "Envelope",
    "Executor",
    "ExecutorConfig",
    "FaultInfo",
    "FunctionRef",
    "Locator",
    "NodeId",
    "Pipeline",
    "PiperSpec",
    "RemoteSlotPool",
    "RunState",
    "RunStats",
    "TaskHandle",
    "TEXT_V1",
    "ValidationReport",
    "WorkUnit",
    "WorkerChain",
    "WorkerRegistry",
    "WorkerServer",
    "apply_chain",
    "compose_chain",
    "connect",
    "create_executor",
    "default_registry",
    "dump_item",
    "errors",
    "get_codec",
    "load_item",
    "load_manifest",
    "log",
    "payload",
    "reap_expired",
    "register_function",
    "save_manifest",
    "serve",
]
