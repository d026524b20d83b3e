"""Instruction set and binary wire encoding.

Every byte that crosses between agents is one length-framed, encoded
:class:`Envelope`. The encoding is canonical and bit-exact: identical
envelopes always produce identical bytes, so golden byte vectors are
stable test oracles.

Layout (all integers little-endian, fixed width)::

    envelope   := version:u16  src:u64  dst:u64  tag:u8  body
    ref        := agent:u64  object:u64         (object 0 is the null ref)
    guard      := agent:u64  guard:u64
    slot       := agent:u64  slot:u64
    blob       := length:u32  bytes
    params     := count:u16  param*
    param      := mode:u8  [writeback:slot if mode=1]  blob
                  (mode 0 = by-value, 1 = by-reference)

    body[0x01 Construct]    := kind_id:u32  result:slot  guard  params
    body[0x02 Invoke]       := target:ref  method_id:u32  result:slot  guard  params
    body[0x03 WriteResult]  := slot  blob
    body[0x04 ReleaseGuard] := guard
    body[0x05 Destroy]      := target:ref  guard
    body[0x06 CopyBlock]    := target:ref  offset:u64  blob  guard
    body[0x07 ReadBlock]    := target:ref  offset:u64  length:u64  result:slot  guard

Blob payloads are opaque to this layer; they are produced and consumed
by per-kind codecs registered with the runtime.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO, Union

WIRE_VERSION = 1

TAG_CONSTRUCT = 0x01
TAG_INVOKE = 0x02
TAG_WRITE_RESULT = 0x03
TAG_RELEASE_GUARD = 0x04
TAG_DESTROY = 0x05
TAG_COPY_BLOCK = 0x06
TAG_READ_BLOCK = 0x07

TAG_NAMES = {
    TAG_CONSTRUCT: "Construct",
    TAG_INVOKE: "Invoke",
    TAG_WRITE_RESULT: "WriteResult",
    TAG_RELEASE_GUARD: "ReleaseGuard",
    TAG_DESTROY: "Destroy",
    TAG_COPY_BLOCK: "CopyBlock",
    TAG_READ_BLOCK: "ReadBlock",
}

# Byte offset of the tag within an encoded envelope: version + src + dst.
TAG_OFFSET = 2 + 8 + 8

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

MAX_BLOB = 2**32 - 1
MAX_PARAMS = 2**16 - 1
MAX_U64 = 2**64 - 1


class WireError(Exception):
    """Base class for encoding/framing failures."""


class MalformedFrame(WireError):
    """A frame that cannot be decoded; carries the offending byte offset."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed frame at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class TruncatedFrame(WireError):
    """The underlying stream closed in the middle of a frame."""


class ParamMode(IntEnum):
    BY_VALUE = 0
    BY_REF = 1


@dataclass(frozen=True)
class RemoteRef:
    """Location of an object: (agent id, object id). Object 0 is null."""

    agent: int
    object: int

    def is_null(self) -> bool:
        return self.object == 0


NULL_REF = RemoteRef(0, 0)


@dataclass(frozen=True)
class GuardRef:
    """Completion token owned by the waiting agent."""

    agent: int
    guard: int


@dataclass(frozen=True)
class ResultSlot:
    """A future's result cell on the calling agent."""

    agent: int
    slot: int


@dataclass(frozen=True)
class Param:
    """One call parameter: an opaque payload plus its passing mode.

    By-reference parameters carry the slot the executor writes the
    updated value back to.
    """

    mode: ParamMode
    payload: bytes
    writeback: ResultSlot | None = None

    def __post_init__(self):
        if self.mode is ParamMode.BY_REF and self.writeback is None:
            raise ValueError("by-reference parameter requires a writeback slot")
        if self.mode is ParamMode.BY_VALUE and self.writeback is not None:
            raise ValueError("by-value parameter must not carry a writeback slot")


@dataclass(frozen=True)
class Construct:
    kind_id: int
    result: ResultSlot
    guard: GuardRef
    params: tuple[Param, ...] = ()

    tag = TAG_CONSTRUCT


@dataclass(frozen=True)
class Invoke:
    target: RemoteRef
    method_id: int
    result: ResultSlot
    guard: GuardRef
    params: tuple[Param, ...] = ()

    tag = TAG_INVOKE


@dataclass(frozen=True)
class WriteResult:
    slot: ResultSlot
    payload: bytes

    tag = TAG_WRITE_RESULT


@dataclass(frozen=True)
class ReleaseGuard:
    guard: GuardRef

    tag = TAG_RELEASE_GUARD


@dataclass(frozen=True)
class Destroy:
    target: RemoteRef
    guard: GuardRef

    tag = TAG_DESTROY


@dataclass(frozen=True)
class CopyBlock:
    target: RemoteRef
    offset: int
    payload: bytes
    guard: GuardRef

    tag = TAG_COPY_BLOCK


@dataclass(frozen=True)
class ReadBlock:
    target: RemoteRef
    offset: int
    length: int
    result: ResultSlot
    guard: GuardRef

    tag = TAG_READ_BLOCK


Instruction = Union[
    Construct, Invoke, WriteResult, ReleaseGuard, Destroy, CopyBlock, ReadBlock
]


@dataclass(frozen=True)
class Envelope:
    src: int
    dst: int
    instruction: Instruction
    version: int = WIRE_VERSION


def instruction_guard(instr: Instruction) -> GuardRef | None:
    """The single guard carried by an instruction, or None for WriteResult."""
    return getattr(instr, "guard", None)


# --- encoding ---------------------------------------------------------------


def _check_u64(value: int, what: str) -> int:
    if not 0 <= value <= MAX_U64:
        raise ValueError(f"{what} out of u64 range: {value}")
    return value


def _put_blob(out: bytearray, payload: bytes):
    if len(payload) > MAX_BLOB:
        raise ValueError(f"blob too large: {len(payload)} bytes")
    out += _U32.pack(len(payload))
    out += payload


def _put_pair(out: bytearray, a: int, b: int, what: str):
    out += _U64.pack(_check_u64(a, what))
    out += _U64.pack(_check_u64(b, what))


def _put_params(out: bytearray, params: tuple[Param, ...]):
    if len(params) > MAX_PARAMS:
        raise ValueError(f"too many parameters: {len(params)}")
    out += _U16.pack(len(params))
    for p in params:
        out.append(int(p.mode))
        if p.mode is ParamMode.BY_REF:
            _put_pair(out, p.writeback.agent, p.writeback.slot, "writeback slot")
        _put_blob(out, p.payload)


def encode(envelope: Envelope) -> bytes:
    """Encode an envelope into its canonical byte form."""
    if envelope.version != WIRE_VERSION:
        raise ValueError(f"unsupported envelope version: {envelope.version}")
    out = bytearray()
    out += _U16.pack(envelope.version)
    out += _U64.pack(_check_u64(envelope.src, "src"))
    out += _U64.pack(_check_u64(envelope.dst, "dst"))
    instr = envelope.instruction
    out.append(instr.tag)
    if isinstance(instr, Construct):
        out += _U32.pack(instr.kind_id)
        _put_pair(out, instr.result.agent, instr.result.slot, "result slot")
        _put_pair(out, instr.guard.agent, instr.guard.guard, "guard")
        _put_params(out, instr.params)
    elif isinstance(instr, Invoke):
        _put_pair(out, instr.target.agent, instr.target.object, "target")
        out += _U32.pack(instr.method_id)
        _put_pair(out, instr.result.agent, instr.result.slot, "result slot")
        _put_pair(out, instr.guard.agent, instr.guard.guard, "guard")
        _put_params(out, instr.params)
    elif isinstance(instr, WriteResult):
        _put_pair(out, instr.slot.agent, instr.slot.slot, "slot")
        _put_blob(out, instr.payload)
    elif isinstance(instr, ReleaseGuard):
        _put_pair(out, instr.guard.agent, instr.guard.guard, "guard")
    elif isinstance(instr, Destroy):
        _put_pair(out, instr.target.agent, instr.target.object, "target")
        _put_pair(out, instr.guard.agent, instr.guard.guard, "guard")
    elif isinstance(instr, CopyBlock):
        _put_pair(out, instr.target.agent, instr.target.object, "target")
        out += _U64.pack(_check_u64(instr.offset, "offset"))
        _put_blob(out, instr.payload)
        _put_pair(out, instr.guard.agent, instr.guard.guard, "guard")
    elif isinstance(instr, ReadBlock):
        _put_pair(out, instr.target.agent, instr.target.object, "target")
        out += _U64.pack(_check_u64(instr.offset, "offset"))
        out += _U64.pack(_check_u64(instr.length, "length"))
        _put_pair(out, instr.result.agent, instr.result.slot, "result slot")
        _put_pair(out, instr.guard.agent, instr.guard.guard, "guard")
    else:
        raise ValueError(f"not an instruction: {instr!r}")
    return bytes(out)


# --- decoding ---------------------------------------------------------------


class _Reader:
    """Cursor over a frame; every failure reports its byte offset."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedFrame(self.pos, f"truncated body: expected {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self._take(1, what)[0]

    def u16(self, what: str) -> int:
        return _U16.unpack(self._take(2, what))[0]

    def u32(self, what: str) -> int:
        return _U32.unpack(self._take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self._take(8, what))[0]

    def blob(self) -> bytes:
        n = self.u32("blob length")
        return self._take(n, f"blob of {n} bytes")

    def ref(self) -> RemoteRef:
        return RemoteRef(self.u64("ref agent"), self.u64("ref object"))

    def guard(self) -> GuardRef:
        return GuardRef(self.u64("guard agent"), self.u64("guard id"))

    def slot(self) -> ResultSlot:
        return ResultSlot(self.u64("slot agent"), self.u64("slot id"))

    def params(self) -> tuple[Param, ...]:
        count = self.u16("parameter count")
        out = []
        for _ in range(count):
            at = self.pos
            mode = self.u8("parameter mode")
            if mode == ParamMode.BY_VALUE:
                out.append(Param(ParamMode.BY_VALUE, self.blob()))
            elif mode == ParamMode.BY_REF:
                wb = self.slot()
                out.append(Param(ParamMode.BY_REF, self.blob(), wb))
            else:
                raise MalformedFrame(at, f"unknown parameter mode 0x{mode:02x}")
        return tuple(out)


def decode(data: bytes) -> Envelope:
    """Exact inverse of :func:`encode`; consumes the whole input.

    Raises :class:`MalformedFrame` on unknown tags, unsupported
    versions, truncated bodies, or trailing bytes.
    """
    r = _Reader(data)
    at = r.pos
    version = r.u16("version")
    if version != WIRE_VERSION:
        raise MalformedFrame(at, f"unsupported version {version}")
    src = r.u64("src agent")
    dst = r.u64("dst agent")
    at = r.pos
    tag = r.u8("instruction tag")
    instr: Instruction
    if tag == TAG_CONSTRUCT:
        kind_id = r.u32("kind id")
        result = r.slot()
        guard = r.guard()
        instr = Construct(kind_id, result, guard, r.params())
    elif tag == TAG_INVOKE:
        target = r.ref()
        method_id = r.u32("method id")
        result = r.slot()
        guard = r.guard()
        instr = Invoke(target, method_id, result, guard, r.params())
    elif tag == TAG_WRITE_RESULT:
        instr = WriteResult(r.slot(), r.blob())
    elif tag == TAG_RELEASE_GUARD:
        instr = ReleaseGuard(r.guard())
    elif tag == TAG_DESTROY:
        instr = Destroy(r.ref(), r.guard())
    elif tag == TAG_COPY_BLOCK:
        target = r.ref()
        offset = r.u64("offset")
        payload = r.blob()
        instr = CopyBlock(target, offset, payload, r.guard())
    elif tag == TAG_READ_BLOCK:
        target = r.ref()
        offset = r.u64("offset")
        length = r.u64("length")
        result = r.slot()
        instr = ReadBlock(target, offset, length, result, r.guard())
    else:
        raise MalformedFrame(at, f"unknown instruction tag 0x{tag:02x}")
    if r.pos != len(data):
        raise MalformedFrame(r.pos, f"{len(data) - r.pos} trailing bytes")
    return Envelope(src=src, dst=dst, instruction=instr, version=version)


# --- framing ----------------------------------------------------------------

FRAME_HEADER = 4


def write_frame(payload: bytes) -> bytes:
    """Prefix a payload with its u32 little-endian length."""
    if len(payload) > MAX_BLOB:
        raise ValueError(f"frame payload too large: {len(payload)}")
    return _U32.pack(len(payload)) + payload


def read_frame(stream: BinaryIO) -> bytes | None:
    """Read one length-prefixed frame from a blocking byte stream.

    Returns None on a clean end-of-stream at a frame boundary; raises
    :class:`TruncatedFrame` if the stream closes mid-frame.
    """
    header = _read_exact(stream, FRAME_HEADER)
    if header is None:
        return None
    if len(header) < FRAME_HEADER:
        raise TruncatedFrame(f"stream closed inside frame header ({len(header)}/4 bytes)")
    (length,) = _U32.unpack(header)
    if length == 0:
        return b""
    payload = _read_exact(stream, length)
    if payload is None or len(payload) < length:
        got = 0 if payload is None else len(payload)
        raise TruncatedFrame(f"stream closed inside frame body ({got}/{length} bytes)")
    return payload


def _read_exact(stream: BinaryIO, n: int) -> bytes | None:
    """Read exactly n bytes; None if the stream is already at EOF."""
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            if not chunks:
                return None
            return b"".join(chunks)
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)
