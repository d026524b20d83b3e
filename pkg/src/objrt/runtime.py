"""The virtual host runtime.

Each agent owns an object table and a guard table, receives framed
instructions on a dispatcher thread, executes them on a growing worker
pool, and pushes outgoing instructions through a dedicated sender
thread. Results are written back to the caller's result slot before the
caller's guard is released, always in that order on the wire.

Application object kinds are registered by hand (a :class:`KindDescriptor`
per kind, identical ids on every agent); the runtime never interprets
parameter payloads itself.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import pickle
import random
import threading
import time
import traceback
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from . import wire
from .futures import (
    Activity,
    ExecMode,
    Future,
    current_activity,
    drain_scope,
    encode_error,
    encode_ok,
    raw_bytes,
    set_activity,
    set_worker_pool,
)
from .transport import AgentAddress, TransportError

logger = logging.getLogger("objrt.runtime")


class ProtocolError(Exception):
    """A violation of the instruction protocol detected locally."""


class DuplicateKindError(Exception):
    """Two registrations used the same kind id."""


# --- kind registry -----------------------------------------------------------


@dataclass
class KindDescriptor:
    """Everything an agent needs to host objects of one application kind.

    ``serialize``/``deserialize`` encode this kind's parameter and
    result values; they default to pickle. A caller that invokes a kind
    with non-default codecs must pass the kind id to the invoke so both
    sides agree. ``concurrency_safe`` kinds may execute several methods
    on one instance at once; by default method executions on a single
    object are serialized in arrival order.
    """

    kind_id: int
    name: str
    construct: Callable[..., Any]
    methods: dict[int, Callable[..., Any]] = field(default_factory=dict)
    serialize: Callable[[Any], bytes] = pickle.dumps
    deserialize: Callable[[bytes], Any] = pickle.loads
    concurrency_safe: bool = False
    read_block: Callable[[Any, int, int], bytes] | None = None
    write_block: Callable[[Any, int, bytes], None] | None = None


class KindRegistry:
    """Kind table shared by every agent of a cluster run."""

    def __init__(self):
        self._kinds: dict[int, KindDescriptor] = {}

    def register(self, descriptor: KindDescriptor) -> KindDescriptor:
        if descriptor.kind_id in self._kinds:
            raise DuplicateKindError(
                f"kind id {descriptor.kind_id} already registered "
                f"({self._kinds[descriptor.kind_id].name})")
        self._kinds[descriptor.kind_id] = descriptor
        return descriptor

    def get(self, kind_id: int) -> KindDescriptor:
        return self._kinds[kind_id]

    def has(self, kind_id: int) -> bool:
        return kind_id in self._kinds


def register_kind(registry: KindRegistry, descriptor: KindDescriptor) -> KindDescriptor:
    return registry.register(descriptor)


# --- guard and slot table ------------------------------------------------------


class _GuardEntry:
    __slots__ = ("event", "released")

    def __init__(self):
        self.event = threading.Event()
        self.released = False


class GuardTable:
    """Pending guards plus result slots, one table per agent.

    Guard and slot ids come from a single monotone counter so that
    instructions with no result-slot field on the wire (CopyBlock,
    Destroy) can still report failures: their guard id doubles as a
    slot id on the issuing agent, and the executor writes error
    payloads there.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._next = itertools.count(1)
        self._guards: dict[int, _GuardEntry] = {}
        self._slots: dict[int, bytes] = {}
        self._slot_ids: set[int] = set()
        self.issued = 0
        self.released_count = 0
        self.duplicate_releases = 0

    def new_guard(self) -> int:
        gid = next(self._next)
        with self._lock:
            self._guards[gid] = _GuardEntry()
            self.issued += 1
        return gid

    def new_slot(self) -> int:
        sid = next(self._next)
        with self._lock:
            self._slot_ids.add(sid)
        return sid

    def new_guarded_slot(self) -> int:
        """One id registered both as a guard and as its error slot."""
        gid = next(self._next)
        with self._lock:
            self._guards[gid] = _GuardEntry()
            self._slot_ids.add(gid)
            self.issued += 1
        return gid

    def event_of(self, gid: int) -> threading.Event:
        with self._lock:
            return self._guards[gid].event

    def is_released(self, gid: int) -> bool:
        with self._lock:
            entry = self._guards.get(gid)
            return entry is not None and entry.released

    def release(self, gid: int) -> bool:
        """Release a guard; False for unknown ids or repeat releases."""
        with self._lock:
            entry = self._guards.get(gid)
            if entry is None or entry.released:
                self.duplicate_releases += 1
                return False
            entry.released = True
            self.released_count += 1
        entry.event.set()
        return True

    def write_slot(self, sid: int, payload: bytes) -> bool:
        """Fill a result slot; False if unknown or already written."""
        with self._lock:
            if sid not in self._slot_ids or sid in self._slots:
                return False
            self._slots[sid] = payload
        return True

    def take_slot(self, sid: int) -> bytes | None:
        with self._lock:
            return self._slots.pop(sid, None)

    def stats(self) -> dict:
        with self._lock:
            return {
                "issued": self.issued,
                "released": self.released_count,
                "duplicate_releases": self.duplicate_releases,
                "unreleased": self.issued - self.released_count,
            }


# --- object table --------------------------------------------------------------


class _ObjectEntry:
    __slots__ = ("object_id", "kind_id", "instance", "queue", "active", "destroyed")

    def __init__(self, object_id: int, kind_id: int, instance: Any):
        self.object_id = object_id
        self.kind_id = kind_id
        self.instance = instance
        self.queue: deque = deque()
        self.active = False
        self.destroyed = False


class ObjectTable:
    """Object-id to instance map; ids are monotone and never reused."""

    def __init__(self):
        self._lock = threading.Lock()
        self._next = itertools.count(1)
        self._entries: dict[int, _ObjectEntry] = {}

    def add(self, kind_id: int, instance: Any) -> int:
        oid = next(self._next)
        with self._lock:
            self._entries[oid] = _ObjectEntry(oid, kind_id, instance)
        return oid

    def get(self, oid: int) -> _ObjectEntry | None:
        with self._lock:
            return self._entries.get(oid)

    def remove(self, oid: int) -> bool:
        with self._lock:
            entry = self._entries.pop(oid, None)
            if entry is None:
                return False
            entry.destroyed = True
            return True

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# --- worker pool ----------------------------------------------------------------


_POOL_STOP = object()


class WorkerPool:
    """Unbounded-by-design worker pool that grows when workers block.

    A worker about to block on a guard wait notifies the pool; if no
    idle worker remains, one more thread is spawned (up to a ceiling,
    after which exhaustion is flagged instead of deadlocking silently).
    """

    def __init__(self, name: str, min_workers: int = 2, ceiling: int = 1024,
                 on_exhausted: Callable[[], None] | None = None):
        self._name = name
        self._ceiling = ceiling
        self._on_exhausted = on_exhausted
        self._queue: deque = deque()
        self._cv = threading.Condition()
        self._total = 0
        self._idle = 0
        self._stopping = False
        for _ in range(max(1, min_workers)):
            self._spawn()

    def _spawn(self):
        self._total += 1
        t = threading.Thread(target=self._loop, name=f"{self._name}-w{self._total}",
                             daemon=True)
        t.start()

    def submit(self, job: Callable[[], None]):
        with self._cv:
            self._queue.append(job)
            self._cv.notify()

    def on_worker_blocking(self):
        """Called by a pool thread right before it parks on a guard."""
        with self._cv:
            if self._stopping:
                return
            if self._idle == 0:
                if self._total < self._ceiling:
                    self._spawn()
                elif self._on_exhausted is not None:
                    self._on_exhausted()

    def _loop(self):
        set_worker_pool(self)
        while True:
            with self._cv:
                self._idle += 1
                while not self._queue:
                    self._cv.wait()
                self._idle -= 1
                job = self._queue.popleft()
            if job is _POOL_STOP:
                with self._cv:
                    self._total -= 1
                return
            try:
                job()
            except Exception:
                logger.exception("unhandled error in %s worker", self._name)

    def stop(self):
        with self._cv:
            self._stopping = True
            n = self._total
            for _ in range(n):
                self._queue.append(_POOL_STOP)
            self._cv.notify_all()

    @property
    def size(self) -> int:
        with self._cv:
            return self._total


# --- tracing ---------------------------------------------------------------------


class TraceSink:
    """Collects runtime events and wire records, per-agent monotone seq.

    Records go to an in-memory list and/or a JSON-lines file; the
    analyzer and the ordering tests consume either form.
    """

    def __init__(self, path: str | None = None, memory: bool = True):
        self._lock = threading.Lock()
        self._seq: dict[int, int] = {}
        self.records: list[dict] | None = [] if memory else None
        self._file = open(path, "w", encoding="utf-8") if path else None
        self.enabled = memory or path is not None

    def emit(self, agent_id: int, rec: str, **fields):
        record = {"rec": rec, "agent": agent_id, "t": time.time_ns()}
        for k, v in fields.items():
            if v is not None:
                record[k] = v
        with self._lock:
            seq = self._seq.get(agent_id, 0) + 1
            self._seq[agent_id] = seq
            record["seq"] = seq
            if self.records is not None:
                self.records.append(record)
            if self._file is not None:
                self._file.write(json.dumps(record) + "\n")

    def close(self):
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None


def payload_digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()[:16]


def _instruction_fields(instr: wire.Instruction, digest: bool = True) -> dict:
    """Trace fields describing an instruction (ids, tag, payload digest)."""
    fields: dict[str, Any] = {"tag": instr.tag}
    guard = wire.instruction_guard(instr)
    if guard is not None:
        fields["guard"] = guard.guard
        fields["gagent"] = guard.agent
    if isinstance(instr, wire.Construct):
        fields["kindid"] = instr.kind_id
        fields["slot"] = instr.result.slot
        fields["sagent"] = instr.result.agent
    elif isinstance(instr, wire.Invoke):
        fields["object"] = instr.target.object
        fields["method"] = instr.method_id
        fields["slot"] = instr.result.slot
        fields["sagent"] = instr.result.agent
    elif isinstance(instr, wire.WriteResult):
        fields["slot"] = instr.slot.slot
        fields["sagent"] = instr.slot.agent
        fields["plen"] = len(instr.payload)
        if digest:
            fields["digest"] = payload_digest(instr.payload)
    elif isinstance(instr, wire.Destroy):
        fields["object"] = instr.target.object
    elif isinstance(instr, wire.CopyBlock):
        fields["object"] = instr.target.object
        fields["offset"] = instr.offset
        fields["plen"] = len(instr.payload)
        if digest:
            fields["digest"] = payload_digest(instr.payload)
    elif isinstance(instr, wire.ReadBlock):
        fields["object"] = instr.target.object
        fields["offset"] = instr.offset
        fields["slot"] = instr.result.slot
        fields["sagent"] = instr.result.agent
    return fields


# --- agent -------------------------------------------------------------------------


@dataclass
class RuntimeConfig:
    mode: ExecMode = ExecMode.CAUSAL_ASYNC
    seed: int = 0
    fuzz_us: tuple[int, int] | None = None
    fuzz_prob: float = 1.0
    wait_timeout_s: float | None = None
    min_workers: int = 2
    pool_ceiling: int = 1024


_SENDER_STOP = object()


class Agent:
    """One virtual host: object table, guard table, dispatcher, pool, sender."""

    def __init__(self, agent_id: int, endpoint, kinds: KindRegistry,
                 sink: TraceSink | None, config: RuntimeConfig | None = None):
        self.agent_id = agent_id
        self.endpoint = endpoint
        self.kinds = kinds
        self.sink = sink
        self._trace = sink if (sink is not None and sink.enabled) else None
        self.config = config or RuntimeConfig()
        self.guards = GuardTable()
        self.objects = ObjectTable()
        self.flags: dict[str, int] = {}
        self._flag_lock = threading.Lock()
        self.pool = WorkerPool(
            f"agent{agent_id}", min_workers=self.config.min_workers,
            ceiling=self.config.pool_ceiling,
            on_exhausted=lambda: self.flag("pool_exhausted"))
        self._outbox: deque = deque()
        self._outbox_cv = threading.Condition()
        self._send_seq = itertools.count(1)
        self._act_seq = itertools.count(1)
        self._rng = random.Random(self.config.seed * 1_000_003 + agent_id)
        self._threads: list[threading.Thread] = []
        self._started = False

    # -- lifecycle

    def start(self):
        if self._started:
            return
        self._started = True
        for name, fn in (("dispatch", self._dispatcher_loop), ("send", self._sender_loop)):
            t = threading.Thread(target=fn, name=f"agent{self.agent_id}-{name}",
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self):
        self.endpoint.close()
        self.pool.stop()
        with self._outbox_cv:
            self._outbox.append(_SENDER_STOP)
            self._outbox_cv.notify()
        for t in self._threads:
            t.join(timeout=10)

    @property
    def wait_timeout(self) -> float | None:
        return self.config.wait_timeout_s

    def flag(self, name: str):
        with self._flag_lock:
            self.flags[name] = self.flags.get(name, 0) + 1
        logger.warning("agent %d flagged: %s", self.agent_id, name)

    def stats(self) -> dict:
        with self._flag_lock:
            flags = dict(self.flags)
        return {"agent": self.agent_id, "flags": flags, "guards": self.guards.stats(),
                "objects": len(self.objects), "pool": self.pool.size}

    def next_act_id(self) -> int:
        return next(self._act_seq)

    # -- tracing

    def trace_event(self, kind: str, **fields):
        if self._trace is not None:
            self._trace.emit(self.agent_id, "event", kind=kind, **fields)

    # -- outgoing path

    def enqueue_out(self, dst: int, instr: wire.Instruction, act: int | None = None,
                    wb: list[int] | None = None):
        """Queue an instruction for the sender; emits the issue trace event."""
        send_id = next(self._send_seq)
        if self._trace is not None:
            fields = _instruction_fields(instr)
            self._trace.emit(self.agent_id, "event", kind="issue", dst=dst,
                             send=send_id, act=act, wb=wb or None, **fields)
        env = wire.Envelope(src=self.agent_id, dst=dst, instruction=instr)
        with self._outbox_cv:
            self._outbox.append((env, send_id))
            self._outbox_cv.notify()

    def _sender_loop(self):
        while True:
            with self._outbox_cv:
                while not self._outbox:
                    self._outbox_cv.wait()
                item = self._outbox.popleft()
            if item is _SENDER_STOP:
                return
            env, send_id = item
            self._fuzz_delay()
            data = wire.encode(env)
            if self._trace is not None:
                fields = _instruction_fields(env.instruction)
                self._trace.emit(self.agent_id, "wire", src=env.src, dst=env.dst,
                                 flen=len(data), send=send_id, **fields)
            try:
                self.endpoint.send_frame(env.dst, data)
            except TransportError as exc:
                self.flag("transport_error")
                logger.error("agent %d: send to %d failed: %s",
                             self.agent_id, env.dst, exc)

    def _fuzz_delay(self):
        fuzz = self.config.fuzz_us
        if fuzz is not None:
            rng = self._rng
            if self.config.fuzz_prob >= 1.0 or rng.random() < self.config.fuzz_prob:
                lo, hi = fuzz
                time.sleep(rng.randint(lo, hi) / 1e6)

    # -- incoming path

    def _dispatcher_loop(self):
        while True:
            item = self.endpoint.recv_frame()
            if item is None:
                return  # orderly shutdown
            src, frame = item
            self._fuzz_delay()
            try:
                env = wire.decode(frame)
            except wire.MalformedFrame as exc:
                self.flag("malformed_frames")
                logger.error("agent %d: dropping frame from %d: %s",
                             self.agent_id, src, exc)
                continue
            if env.dst != self.agent_id:
                self.flag("misrouted_frames")
                continue
            instr = env.instruction
            if self._trace is not None:
                self._trace.emit(self.agent_id, "event", kind="dispatch", src=env.src,
                                 **_instruction_fields(instr, digest=False))
            self._route(instr, env.src)

    def _route(self, instr: wire.Instruction, src: int):
        # WriteResult/ReleaseGuard are pure bookkeeping and must apply in
        # arrival order (result strictly before release), so they run
        # inline on the dispatcher instead of racing across pool workers.
        if isinstance(instr, wire.WriteResult):
            if not self.guards.write_slot(instr.slot.slot, instr.payload):
                self.flag("bad_slot_write")
            else:
                self.trace_event("write_result", slot=instr.slot.slot,
                                 sagent=instr.slot.agent)
            return
        if isinstance(instr, wire.ReleaseGuard):
            if not self.guards.release(instr.guard.guard):
                self.flag("duplicate_release")
            else:
                self.trace_event("release", guard=instr.guard.guard,
                                 gagent=instr.guard.agent)
            return
        if isinstance(instr, wire.Construct):
            self.pool.submit(lambda: self._execute(instr, src, None))
            return
        # Remaining variants target an existing object.
        entry = self.objects.get(instr.target.object)
        if entry is None or entry.destroyed:
            self.pool.submit(lambda: self._execute(instr, src, None))
            return
        if self.kinds.get(entry.kind_id).concurrency_safe:
            self.pool.submit(lambda: self._execute(instr, src, entry))
            return
        # Default: method executions on one object are serialized in
        # arrival order by a per-object job queue.
        submit_drain = False
        with self.objects._lock:
            entry.queue.append((instr, src))
            if not entry.active:
                entry.active = True
                submit_drain = True
        if submit_drain:
            self.pool.submit(lambda: self._drain_object(entry))

    def _drain_object(self, entry: _ObjectEntry):
        while True:
            with self.objects._lock:
                if not entry.queue:
                    entry.active = False
                    return
                instr, src = entry.queue.popleft()
            self._execute(instr, src, entry)

    # -- execution

    def _execute(self, instr: wire.Instruction, src: int, entry: _ObjectEntry | None):
        act = Activity(self, self.config.mode, self.next_act_id())
        set_activity(act)
        try:
            if isinstance(instr, wire.Construct):
                self._exec_construct(instr, act)
            elif isinstance(instr, wire.Invoke):
                self._exec_invoke(instr, entry, act)
            elif isinstance(instr, wire.Destroy):
                self._exec_destroy(instr, entry, act)
            elif isinstance(instr, wire.CopyBlock):
                self._exec_copy_block(instr, entry, act)
            elif isinstance(instr, wire.ReadBlock):
                self._exec_read_block(instr, entry, act)
            else:
                self.flag("unroutable_instruction")
        finally:
            set_activity(None)

    def _call_app(self, fn: Callable[[], Any], act: Activity):
        """Run application code and drain its nested issues.

        A method execution is complete only once every instruction it
        issued has settled; failures (local or nested) are captured and
        become the error payload rather than crashing the agent.
        """
        try:
            value = fn()
            drain_scope(act.scope)
            return value, None
        except Exception as exc:
            try:
                drain_scope(act.scope)
            except Exception:
                pass
            return None, encode_error(exc, traceback.format_exc())

    def _decode_params(self, desc: KindDescriptor | None,
                       params: tuple[wire.Param, ...]):
        deserialize = desc.deserialize if desc is not None else pickle.loads
        args = []
        byrefs = []
        for i, p in enumerate(params):
            args.append(deserialize(p.payload))
            if p.mode is wire.ParamMode.BY_REF:
                byrefs.append((i, p.writeback))
        return args, byrefs

    def _reply(self, dst: int, slot: wire.ResultSlot, payload: bytes,
               guard: wire.GuardRef, act: Activity,
               writebacks: list[tuple[wire.ResultSlot, bytes]] | None = None):
        """Send writebacks, then the result, then the guard release."""
        for wb_slot, blob in writebacks or ():
            self.enqueue_out(dst, wire.WriteResult(wb_slot, blob), act=act.act_id)
        if payload is not None:
            self.enqueue_out(dst, wire.WriteResult(slot, payload), act=act.act_id)
        self.enqueue_out(dst, wire.ReleaseGuard(guard), act=act.act_id)

    def _exec_construct(self, instr: wire.Construct, act: Activity):
        self.trace_event("exec_start", kindid=instr.kind_id, guard=instr.guard.guard,
                         gagent=instr.guard.agent, act=act.act_id)
        writebacks: list[tuple[wire.ResultSlot, bytes]] = []
        if not self.kinds.has(instr.kind_id):
            payload = encode_error(ProtocolError(f"unknown kind {instr.kind_id}"))
        else:
            desc = self.kinds.get(instr.kind_id)
            try:
                args, byrefs = self._decode_params(desc, instr.params)
            except Exception as exc:
                payload, byrefs = encode_error(exc, traceback.format_exc()), []
            else:
                value, err = self._call_app(lambda: desc.construct(*args), act)
                if err is not None:
                    payload = err
                else:
                    oid = self.objects.add(instr.kind_id, value)
                    payload = encode_ok(pickle.dumps(wire.RemoteRef(self.agent_id, oid)))
                    writebacks = [(slot, desc.serialize(args[i])) for i, slot in byrefs]
        self.trace_event("exec_end", kindid=instr.kind_id, guard=instr.guard.guard,
                         gagent=instr.guard.agent, act=act.act_id)
        self._reply(instr.guard.agent, instr.result, payload, instr.guard, act,
                    writebacks)

    def _exec_invoke(self, instr: wire.Invoke, entry: _ObjectEntry | None,
                     act: Activity):
        self.trace_event("exec_start", object=instr.target.object,
                         method=instr.method_id, guard=instr.guard.guard,
                         gagent=instr.guard.agent, act=act.act_id)
        writebacks: list[tuple[wire.ResultSlot, bytes]] = []
        if entry is None or entry.destroyed:
            payload = encode_error(
                ProtocolError(f"unknown object {instr.target.object} on agent "
                              f"{self.agent_id}"))
        else:
            desc = self.kinds.get(entry.kind_id)
            method = desc.methods.get(instr.method_id)
            if method is None:
                payload = encode_error(
                    ProtocolError(f"kind {desc.name} has no method {instr.method_id}"))
            else:
                try:
                    args, byrefs = self._decode_params(desc, instr.params)
                except Exception as exc:
                    payload, byrefs = encode_error(exc, traceback.format_exc()), []
                else:
                    value, err = self._call_app(
                        lambda: method(entry.instance, *args), act)
                    if err is not None:
                        payload = err
                    else:
                        payload = encode_ok(desc.serialize(value))
                        writebacks = [(slot, desc.serialize(args[i]))
                                      for i, slot in byrefs]
        self.trace_event("exec_end", object=instr.target.object,
                         method=instr.method_id, guard=instr.guard.guard,
                         gagent=instr.guard.agent, act=act.act_id)
        self._reply(instr.guard.agent, instr.result, payload, instr.guard, act,
                    writebacks)

    def _exec_destroy(self, instr: wire.Destroy, entry: _ObjectEntry | None,
                      act: Activity):
        self.trace_event("exec_start", object=instr.target.object,
                         guard=instr.guard.guard, gagent=instr.guard.agent,
                         act=act.act_id)
        payload = None
        if entry is None or entry.destroyed or not self.objects.remove(entry.object_id):
            payload = encode_error(
                ProtocolError(f"unknown object {instr.target.object} on agent "
                              f"{self.agent_id}"))
        self.trace_event("exec_end", object=instr.target.object,
                         guard=instr.guard.guard, gagent=instr.guard.agent,
                         act=act.act_id)
        # Failures land in the slot that shares the guard's id.
        error_slot = wire.ResultSlot(instr.guard.agent, instr.guard.guard)
        self._reply(instr.guard.agent, error_slot, payload, instr.guard, act)

    def _exec_copy_block(self, instr: wire.CopyBlock, entry: _ObjectEntry | None,
                         act: Activity):
        self.trace_event("exec_start", object=instr.target.object,
                         guard=instr.guard.guard, gagent=instr.guard.agent,
                         act=act.act_id)
        payload = None
        if entry is None or entry.destroyed:
            payload = encode_error(
                ProtocolError(f"unknown object {instr.target.object} on agent "
                              f"{self.agent_id}"))
        else:
            desc = self.kinds.get(entry.kind_id)
            if desc.write_block is None:
                payload = encode_error(
                    ProtocolError(f"kind {desc.name} has no block accessor"))
            else:
                try:
                    desc.write_block(entry.instance, instr.offset, instr.payload)
                except Exception as exc:
                    payload = encode_error(exc, traceback.format_exc())
        self.trace_event("exec_end", object=instr.target.object,
                         guard=instr.guard.guard, gagent=instr.guard.agent,
                         act=act.act_id)
        error_slot = wire.ResultSlot(instr.guard.agent, instr.guard.guard)
        self._reply(instr.guard.agent, error_slot, payload, instr.guard, act)

    def _exec_read_block(self, instr: wire.ReadBlock, entry: _ObjectEntry | None,
                         act: Activity):
        self.trace_event("exec_start", object=instr.target.object,
                         guard=instr.guard.guard, gagent=instr.guard.agent,
                         act=act.act_id)
        if entry is None or entry.destroyed:
            payload = encode_error(
                ProtocolError(f"unknown object {instr.target.object} on agent "
                              f"{self.agent_id}"))
        else:
            desc = self.kinds.get(entry.kind_id)
            if desc.read_block is None:
                payload = encode_error(
                    ProtocolError(f"kind {desc.name} has no block accessor"))
            else:
                try:
                    data = desc.read_block(entry.instance, instr.offset, instr.length)
                    payload = encode_ok(bytes(data))
                except Exception as exc:
                    payload = encode_error(exc, traceback.format_exc())
        self.trace_event("exec_end", object=instr.target.object,
                         guard=instr.guard.guard, gagent=instr.guard.agent,
                         act=act.act_id)
        self._reply(instr.guard.agent, instr.result, payload, instr.guard, act)

    # -- driving application activities

    def run_activity(self, fn: Callable[..., Any], args: tuple = (),
                     mode: ExecMode | None = None) -> Any:
        """Run fn as a root application activity on this agent's pool."""
        box: dict[str, Any] = {}
        done = threading.Event()

        def job():
            act = Activity(self, mode or self.config.mode, self.next_act_id())
            set_activity(act)
            try:
                value = fn(*args)
                drain_scope(act.scope)
                box["value"] = value
            except BaseException as exc:  # noqa: BLE001 - forwarded to caller
                box["error"] = exc
            finally:
                set_activity(None)
                done.set()

        self.pool.submit(job)
        done.wait()
        if "error" in box:
            raise box["error"]
        return box["value"]


# --- issuing instructions (used by the public api and built-in kinds) -----------


def _encode_call_params(agent: Agent, params, modes, serialize, deserialize):
    entries = []
    writebacks = []
    for i, value in enumerate(params):
        mode = wire.ParamMode.BY_VALUE
        if modes is not None and i < len(modes):
            mode = wire.ParamMode(modes[i])
        blob = serialize(value)
        if mode is wire.ParamMode.BY_REF:
            sid = agent.guards.new_slot()
            entries.append(wire.Param(mode, blob, wire.ResultSlot(agent.agent_id, sid)))
            writebacks.append((sid, value, deserialize))
        else:
            entries.append(wire.Param(mode, blob))
    return tuple(entries), tuple(writebacks)


def _codecs_for(agent: Agent, kind_id: int | None):
    if kind_id is not None and agent.kinds.has(kind_id):
        desc = agent.kinds.get(kind_id)
        return desc.serialize, desc.deserialize
    return pickle.dumps, pickle.loads


def _register_and_maybe_wait(act: Activity, future: Future) -> Future:
    act.scope.register(future)
    if act.mode is ExecMode.DISTRIBUTED_SEQUENTIAL:
        future.wait()
    return future


def issue_construct(host_agent: int, kind_id: int, params=(), modes=None) -> Future:
    act = current_activity()
    agent = act.agent
    serialize, deserialize = _codecs_for(agent, kind_id)
    # params encode before the guard exists: a codec failure must not leak one
    entries, writebacks = _encode_call_params(agent, params, modes, serialize,
                                              deserialize)
    gid = agent.guards.new_guard()
    sid = agent.guards.new_slot()
    instr = wire.Construct(kind_id, wire.ResultSlot(agent.agent_id, sid),
                           wire.GuardRef(agent.agent_id, gid), entries)
    agent.enqueue_out(host_agent, instr, act=act.act_id,
                      wb=[w[0] for w in writebacks])
    future = Future(agent, gid, sid, pickle.loads, writebacks)
    return _register_and_maybe_wait(act, future)


def issue_invoke(target: wire.RemoteRef, method_id: int, params=(), modes=None,
                 kind_id: int | None = None) -> Future:
    act = current_activity()
    agent = act.agent
    serialize, deserialize = _codecs_for(agent, kind_id)
    entries, writebacks = _encode_call_params(agent, params, modes, serialize,
                                              deserialize)
    gid = agent.guards.new_guard()
    sid = agent.guards.new_slot()
    instr = wire.Invoke(target, method_id, wire.ResultSlot(agent.agent_id, sid),
                        wire.GuardRef(agent.agent_id, gid), entries)
    agent.enqueue_out(target.agent, instr, act=act.act_id,
                      wb=[w[0] for w in writebacks])
    future = Future(agent, gid, sid, deserialize, writebacks)
    return _register_and_maybe_wait(act, future)


def issue_destroy(target: wire.RemoteRef) -> Future:
    act = current_activity()
    agent = act.agent
    gid = agent.guards.new_guarded_slot()
    instr = wire.Destroy(target, wire.GuardRef(agent.agent_id, gid))
    agent.enqueue_out(target.agent, instr, act=act.act_id)
    return _register_and_maybe_wait(act, Future(agent, gid, gid))


def issue_copy_block(target: wire.RemoteRef, offset: int, data: bytes) -> Future:
    act = current_activity()
    agent = act.agent
    gid = agent.guards.new_guarded_slot()
    instr = wire.CopyBlock(target, offset, bytes(data),
                           wire.GuardRef(agent.agent_id, gid))
    agent.enqueue_out(target.agent, instr, act=act.act_id)
    return _register_and_maybe_wait(act, Future(agent, gid, gid))


def issue_read_block(target: wire.RemoteRef, offset: int, length: int) -> Future:
    act = current_activity()
    agent = act.agent
    gid = agent.guards.new_guard()
    sid = agent.guards.new_slot()
    instr = wire.ReadBlock(target, offset, length,
                           wire.ResultSlot(agent.agent_id, sid),
                           wire.GuardRef(agent.agent_id, gid))
    agent.enqueue_out(target.agent, instr, act=act.act_id)
    return _register_and_maybe_wait(act, Future(agent, gid, sid, raw_bytes))


# --- built-in kinds -----------------------------------------------------------

REGISTRY_KIND = 1
REGISTRY_OBJECT = wire.RemoteRef(0, 1)
METHOD_RESOLVE = 1

ECHO_KIND = 2
METHOD_ECHO = 1
METHOD_SLEEP_ECHO = 2

RELAY_KIND = 3
METHOD_RELAY_ECHO = 1


class HostDirectory:
    """The launcher-side name service: host names map to agents round-robin."""

    def __init__(self, app_agents: list[AgentAddress]):
        if not app_agents:
            raise ValueError("cluster has no application agents")
        self._agents = sorted(app_agents, key=lambda a: a.agent)
        self._by_name: dict[str, AgentAddress] = {}
        self._cursor = 0

    def resolve(self, name: str) -> AgentAddress:
        addr = self._by_name.get(name)
        if addr is None:
            addr = self._agents[self._cursor % len(self._agents)]
            self._cursor += 1
            self._by_name[name] = addr
        return addr


class _Echo:
    def echo(self, value):
        return value

    def sleep_echo(self, value, seconds: float):
        time.sleep(seconds)
        return value


class _Relay:
    def relay_echo(self, target: wire.RemoteRef, value):
        return issue_invoke(target, METHOD_ECHO, [value]).wait()


def builtin_registry() -> KindRegistry:
    """Registry pre-loaded with the runtime's service kinds."""
    registry = KindRegistry()
    registry.register(KindDescriptor(
        kind_id=REGISTRY_KIND, name="host-directory", construct=HostDirectory,
        methods={METHOD_RESOLVE: lambda inst, name: inst.resolve(name)}))
    registry.register(KindDescriptor(
        kind_id=ECHO_KIND, name="echo", construct=_Echo,
        methods={METHOD_ECHO: lambda inst, v: inst.echo(v),
                 METHOD_SLEEP_ECHO: lambda inst, v, s: inst.sleep_echo(v, s)}))
    registry.register(KindDescriptor(
        kind_id=RELAY_KIND, name="relay", construct=_Relay,
        methods={METHOD_RELAY_ECHO: lambda inst, ref, v: inst.relay_echo(ref, v)}))
    return registry
