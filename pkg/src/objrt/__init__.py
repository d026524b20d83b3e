"""objrt: a distributed-object runtime.

Agents act as virtual hosts for application objects; remote
construction and method invocation return implicit futures backed by a
guard-release protocol, and every byte between agents is a serialized
instruction. See the README for the programming model and the wire
format.
"""

from .api import (
    AgentAddress,
    DrainError,
    ExecMode,
    Future,
    ParamMode,
    RemoteArray,
    RemoteExecutionError,
    RemoteRef,
    WaitTimeout,
    barrier_scope,
    create_host,
    guard_wait,
    iter_parallel,
    iter_parallel_iterations,
    iter_seq_iterations,
    iter_sequential,
    remote_construct,
    remote_destroy,
    remote_invoke,
    remote_read,
    remote_write,
    scope_run,
    wait_all,
)
from .cluster import ClusterHandle, ConfigurationError, spawn_cluster
from .runtime import KindDescriptor, KindRegistry, register_kind
from .transport import StartupError, TransportError

__version__ = "0.1.0"
