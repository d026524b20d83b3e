"""Programmer-facing surface of the runtime.

Remote construction and invocation return implicit futures; reading a
future waits for its guard. Scopes and the iteration combinators give
the same fine-grained control over parallelism as nesting compound
statements does in the source model:

* ``scope_run``       plain compound statement (pending work propagates)
* ``barrier_scope``   nested compound statement as a barrier
* ``iter_parallel``             loop, no inner nesting: everything overlaps
* ``iter_seq_iterations``       loop body double-nested: iterations serialize
* ``iter_parallel_iterations``  second statement nested: steps serialize
                                within an iteration, iterations overlap
* ``iter_sequential``           first statement nested: total order
"""

from __future__ import annotations

import struct
import threading
from functools import partial
from typing import Any, Callable, Sequence

from .futures import (
    Activity,
    DrainError,
    ExecMode,
    Future,
    RemoteExecutionError,
    Scope,
    WaitTimeout,
    current_activity,
    drain_scope,
    guard_wait,
    set_activity,
)
from .runtime import (
    METHOD_RESOLVE,
    REGISTRY_OBJECT,
    issue_construct,
    issue_copy_block,
    issue_destroy,
    issue_invoke,
    issue_read_block,
)
from .transport import AgentAddress
from .wire import ParamMode, RemoteRef

__all__ = [
    "AgentAddress", "DrainError", "ExecMode", "Future", "ParamMode",
    "RemoteArray", "RemoteExecutionError", "RemoteRef", "WaitTimeout",
    "barrier_scope", "create_host", "guard_wait", "iter_parallel",
    "iter_parallel_iterations", "iter_seq_iterations", "iter_sequential",
    "remote_construct", "remote_destroy", "remote_invoke", "remote_read",
    "remote_write", "scope_run", "wait_all",
]


def _as_ref(target) -> RemoteRef:
    """Resolve a target to a RemoteRef, waiting a future first if needed."""
    if isinstance(target, Future):
        target = target.wait()
    if isinstance(target, RemoteRef):
        return target
    raise TypeError(f"not a remote reference: {target!r}")


def _as_agent_id(host) -> int:
    if isinstance(host, Future):
        host = host.wait()
    if isinstance(host, AgentAddress):
        return host.agent
    if isinstance(host, int):
        return host
    raise TypeError(f"not a host address: {host!r}")


def create_host(name: str) -> Future:
    """Ask the launcher's registry for the agent serving a host name.

    The same name always maps to the same agent within a run; fresh
    names are assigned round-robin over the cluster.
    """
    return issue_invoke(REGISTRY_OBJECT, METHOD_RESOLVE, [name])


def remote_construct(host, kind_id: int, params: Sequence = (),
                     modes: Sequence[ParamMode] | None = None) -> Future:
    """Construct an object of a registered kind on a host; future of its ref."""
    return issue_construct(_as_agent_id(host), kind_id, params, modes)


def remote_invoke(target, method_id: int, params: Sequence = (),
                  modes: Sequence[ParamMode] | None = None,
                  kind_id: int | None = None) -> Future:
    """Invoke a method on a remote object; future of the return value.

    ``modes`` selects by-value/by-reference per parameter; by-reference
    arguments are overwritten with the executor's final copy no later
    than the future's resolution. Pass ``kind_id`` when the kind uses
    non-default codecs.
    """
    return issue_invoke(_as_ref(target), method_id, params, modes, kind_id)


def remote_destroy(target) -> Future:
    return issue_destroy(_as_ref(target))


def remote_read(target, offset: int, length: int) -> Future:
    """Read a byte range of a remote object's block storage."""
    return issue_read_block(_as_ref(target), offset, length)


def remote_write(target, offset: int, data: bytes) -> Future:
    """Overwrite a byte range of a remote object's block storage."""
    return issue_copy_block(_as_ref(target), offset, data)


def wait_all() -> None:
    """Drain every pending future registered in the current scope."""
    drain_scope(current_activity().scope)


# --- scopes -------------------------------------------------------------------


def scope_run(body: Callable[[], Any]) -> Any:
    """Run body in a plain nested scope; its pending work joins the parent."""
    act = current_activity()
    child = Scope(act.scope)
    act.scope = child
    try:
        return body()
    finally:
        act.scope = child.parent
        act.scope.adopt(child.pending)


def barrier_scope(body: Callable[[], Any]) -> Any:
    """Run body as a barrier statement.

    Pending work of the enclosing scope drains before body starts; the
    statements inside run with no mutual ordering; everything they
    issued drains before this call returns. Errors from inside surface
    after all guards settle.
    """
    act = current_activity()
    drain_scope(act.scope)
    child = Scope(act.scope)
    act.scope = child
    body_error: BaseException | None = None
    result = None
    try:
        result = body()
    except BaseException as exc:  # noqa: BLE001 - re-raised after the drain
        body_error = exc
    finally:
        act.scope = child.parent
    if body_error is not None:
        try:
            drain_scope(child)
        except Exception:
            pass
        raise body_error
    drain_scope(child)
    return result


# --- iteration combinators ------------------------------------------------------


def iter_parallel(n: int, body: Callable[[int], Any]) -> None:
    """Loop with no inner nesting: all issued work may overlap freely."""
    for i in range(n):
        body(i)


def iter_seq_iterations(n: int, body: Callable[[int], Any]) -> None:
    """Iterations serialize; the statements inside one iteration overlap."""
    for i in range(n):
        barrier_scope(partial(body, i))


def iter_sequential(n: int, step_a: Callable[[int], Any],
                    step_b: Callable[[int], Any]) -> None:
    """Total order: a(0), b(0), a(1), b(1), ...

    The first step runs as a barrier statement, so each iteration's
    barrier drains the previous iteration's second step first.
    """
    for i in range(n):
        barrier_scope(partial(step_a, i))
        step_b(i)


def iter_parallel_iterations(n: int, step_a: Callable[[int], Any],
                             step_b: Callable[[int], Any]) -> None:
    """Iterations overlap; within one iteration b starts after a settles.

    Each iteration runs as its own child activity; their leftover
    pending work (the b steps) joins the caller's scope on return.
    """
    act = current_activity()
    if act.mode is ExecMode.DISTRIBUTED_SEQUENTIAL:
        for i in range(n):
            step_a(i)
            step_b(i)
        return
    agent = act.agent
    pending: list[list] = [[] for _ in range(n)]
    errors: list[BaseException | None] = [None] * n

    def iteration(i: int):
        child = Activity(agent, act.mode, agent.next_act_id())
        set_activity(child)
        try:
            step_a(i)
            drain_scope(child.scope)
            step_b(i)
            pending[i] = child.scope.pending
        except BaseException as exc:  # noqa: BLE001 - re-raised by the parent
            errors[i] = exc
        finally:
            set_activity(None)

    threads = [threading.Thread(target=iteration, args=(i,),
                                name=f"iter-par-{i}", daemon=True)
               for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for futs in pending:
        act.scope.adopt(futs)
    for err in errors:
        if err is not None:
            raise err


# --- element-level array sugar ---------------------------------------------------


class RemoteArray:
    """Element get/set over a remote object with block storage.

    Offsets are element index times element width; the default element
    format is a little-endian double.
    """

    def __init__(self, ref, element_format: str = "<d"):
        self.ref = _as_ref(ref)
        self._struct = struct.Struct(element_format)

    @property
    def element_size(self) -> int:
        return self._struct.size

    def set(self, index: int, value) -> Future:
        data = self._struct.pack(value)
        return remote_write(self.ref, index * self._struct.size, data)

    def get(self, index: int):
        blob = remote_read(self.ref, index * self._struct.size,
                           self._struct.size).wait()
        return self._struct.unpack(blob)[0]
