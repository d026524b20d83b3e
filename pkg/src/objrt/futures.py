"""Implicit futures, guard waits, scopes, and activity context.

A Future pairs a guard (completion token) with a result slot on the
issuing agent. Reading the value blocks until the executing agent
releases the guard; error payloads surface as exceptions on first
read. Scopes collect the guards issued by a block of code so barrier
semantics can drain them.
"""

from __future__ import annotations

import pickle
import threading
from enum import Enum
from typing import Any, Callable

RESULT_OK = 0
RESULT_ERR = 1

_UNSET = object()


class ExecMode(Enum):
    """How remote issues behave: overlap freely, or wait immediately."""

    CAUSAL_ASYNC = "causal"
    DISTRIBUTED_SEQUENTIAL = "seq"


class RemoteExecutionError(Exception):
    """A remote construct/invoke/block operation failed on the executor."""

    def __init__(self, message: str, remote_type: str = "", remote_traceback: str = ""):
        super().__init__(message)
        self.remote_type = remote_type
        self.remote_traceback = remote_traceback


class WaitTimeout(Exception):
    """A guard wait exceeded the configured timeout (likely a cyclic wait)."""


class DrainError(Exception):
    """More than one future failed while draining a scope."""

    def __init__(self, errors: list[Exception]):
        super().__init__(f"{len(errors)} remote operations failed; first: {errors[0]}")
        self.errors = errors


def encode_ok(blob: bytes) -> bytes:
    return bytes([RESULT_OK]) + blob


def encode_error(exc: BaseException, traceback_text: str = "") -> bytes:
    detail = {
        "type": type(exc).__name__,
        "message": str(exc),
        "traceback": traceback_text,
    }
    return bytes([RESULT_ERR]) + pickle.dumps(detail)


def decode_result(payload: bytes, deserialize: Callable[[bytes], Any]) -> Any:
    """Unpack a result payload; raises RemoteExecutionError for error payloads."""
    if not payload:
        raise RemoteExecutionError("empty result payload")
    marker, blob = payload[0], payload[1:]
    if marker == RESULT_OK:
        return deserialize(blob)
    if marker == RESULT_ERR:
        detail = pickle.loads(blob)
        raise RemoteExecutionError(
            f"remote {detail['type']}: {detail['message']}",
            remote_type=detail["type"],
            remote_traceback=detail.get("traceback", ""),
        )
    raise RemoteExecutionError(f"unknown result marker 0x{marker:02x}")


def raw_bytes(blob: bytes) -> bytes:
    return blob


# --- activity context --------------------------------------------------------

_tls = threading.local()


class Scope:
    """Set of futures issued within one lexical region of an activity."""

    __slots__ = ("parent", "pending")

    def __init__(self, parent: "Scope | None" = None):
        self.parent = parent
        self.pending: list[Future] = []

    def register(self, future: "Future"):
        self.pending.append(future)

    def adopt(self, futures: list["Future"]):
        self.pending.extend(futures)


class Activity:
    """One logical thread of application execution on an agent."""

    __slots__ = ("agent", "scope", "mode", "act_id")

    def __init__(self, agent, mode: ExecMode, act_id: int):
        self.agent = agent
        self.scope = Scope()
        self.mode = mode
        self.act_id = act_id


def current_activity() -> Activity:
    act = getattr(_tls, "activity", None)
    if act is None:
        raise RuntimeError("no active cluster activity on this thread")
    return act


def current_activity_or_none() -> Activity | None:
    return getattr(_tls, "activity", None)


def set_activity(act: Activity | None):
    _tls.activity = act


def worker_pool_of_thread():
    return getattr(_tls, "worker_pool", None)


def set_worker_pool(pool):
    _tls.worker_pool = pool


# --- futures -----------------------------------------------------------------


class Future:
    """Handle to a pending remote result.

    The first read waits for the guard release, pops the result slot,
    applies any by-reference writebacks in place, and caches the
    decoded value; later reads return the cache. Shareable across
    threads.
    """

    def __init__(self, agent, guard_id: int, slot_id: int | None,
                 deserialize: Callable[[bytes], Any] = pickle.loads,
                 writebacks: tuple[tuple[int, Any, Callable], ...] = ()):
        self._agent = agent
        self.guard_id = guard_id
        self.slot_id = slot_id
        self._deserialize = deserialize
        self._writebacks = writebacks
        self._lock = threading.Lock()
        self._settled = False
        self._value: Any = None
        self._error: Exception | None = None

    def done(self) -> bool:
        return self._settled or self._agent.guards.is_released(self.guard_id)

    @property
    def settled(self) -> bool:
        """True once some reader has observed this future's outcome."""
        return self._settled

    def wait(self, timeout: Any = _UNSET) -> Any:
        """Block until the guard is released, then return (or raise) the result."""
        with self._lock:
            if self._settled:
                return self._finish()
        agent = self._agent
        if timeout is _UNSET:
            timeout = agent.wait_timeout
        event = agent.guards.event_of(self.guard_id)
        act = current_activity_or_none()
        act_id = act.act_id if act is not None and act.agent is agent else None
        agent.trace_event("wait_begin", guard=self.guard_id, gagent=agent.agent_id,
                          act=act_id)
        if not event.is_set():
            pool = worker_pool_of_thread()
            if pool is not None:
                pool.on_worker_blocking()
            if not event.wait(timeout):
                raise WaitTimeout(
                    f"guard {self.guard_id} on agent {agent.agent_id} not released "
                    f"within {timeout}s")
        agent.trace_event("wait_end", guard=self.guard_id, gagent=agent.agent_id,
                          act=act_id)
        with self._lock:
            if not self._settled:
                self._settle()
            return self._finish()

    # value/error already decided; deliver them
    def _finish(self) -> Any:
        if self._error is not None:
            raise self._error
        return self._value

    def _settle(self):
        agent = self._agent
        for slot_id, target, deserialize in self._writebacks:
            payload = agent.guards.take_slot(slot_id)
            if payload is None:
                continue  # executor failed before writeback
            overwrite_in_place(target, deserialize(payload))
        payload = agent.guards.take_slot(self.slot_id) if self.slot_id is not None else None
        if payload is None:
            self._value = None
        else:
            try:
                self._value = decode_result(payload, self._deserialize)
            except Exception as exc:
                self._error = exc
        self._settled = True


def guard_wait(future: Future, timeout: Any = _UNSET) -> Any:
    """Explicit wait on a future; identical to reading its value."""
    return future.wait(timeout)


def drain_scope(scope: Scope):
    """Wait every pending future in the scope; errors surface after all settle.

    Futures whose outcome was already observed by a reader are skipped:
    an error surfaces exactly once, at its first observation.
    """
    errors: list[Exception] = []
    while scope.pending:
        batch = scope.pending
        scope.pending = []
        for f in batch:
            if f.settled:
                continue
            try:
                f.wait()
            except Exception as exc:  # noqa: BLE001 - collected and re-raised
                errors.append(exc)
    if errors:
        if len(errors) == 1:
            raise errors[0]
        raise DrainError(errors)


def overwrite_in_place(target: Any, new_value: Any):
    """Update the caller's by-reference argument to match the executor's copy."""
    if target is new_value:
        return
    if isinstance(target, list):
        target[:] = new_value
    elif isinstance(target, dict):
        target.clear()
        target.update(new_value)
    elif isinstance(target, set):
        target.clear()
        target.update(new_value)
    elif isinstance(target, bytearray):
        target[:] = new_value
    elif hasattr(target, "apply_writeback"):
        target.apply_writeback(new_value)
    elif hasattr(target, "shape") and hasattr(target, "__setitem__"):
        target[...] = new_value
    elif hasattr(target, "__dict__") and hasattr(new_value, "__dict__"):
        target.__dict__.clear()
        target.__dict__.update(new_value.__dict__)
    else:
        raise TypeError(
            f"cannot write back into {type(target).__name__}; by-reference "
            "arguments must be mutable containers or objects")
