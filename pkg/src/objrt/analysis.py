"""Offline analysis of runtime traces.

Consumes the JSON-lines records agents emit (events plus wire records),
validates their structure, and derives communication facts: per-pair
traffic totals and broadcast patterns (one source sending the same
payload to many destinations), which quantify what an aggregating
interconnect could save. The same module hosts the protocol checkers
the ordering tests are built on.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .wire import (
    TAG_CONSTRUCT,
    TAG_COPY_BLOCK,
    TAG_DESTROY,
    TAG_INVOKE,
    TAG_READ_BLOCK,
    TAG_RELEASE_GUARD,
    TAG_WRITE_RESULT,
)

# Instructions that initiate remote work and therefore carry a fresh guard.
INITIATOR_TAGS = frozenset(
    [TAG_CONSTRUCT, TAG_INVOKE, TAG_DESTROY, TAG_COPY_BLOCK, TAG_READ_BLOCK])

EVENT_KINDS = frozenset(
    ["issue", "dispatch", "exec_start", "exec_end", "write_result", "release",
     "wait_begin", "wait_end"])


class TraceValidationError(Exception):
    """The trace is structurally inconsistent; problems lists offenders."""

    def __init__(self, problems: list[str]):
        shown = "; ".join(problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        super().__init__(f"invalid trace: {shown}{more}")
        self.problems = problems


@dataclass
class Trace:
    """Merged, validated trace: events and wire records of every agent."""

    records: list[dict]

    def __post_init__(self):
        self.events = [r for r in self.records if r.get("rec") == "event"]
        self.wires = [r for r in self.records if r.get("rec") == "wire"]
        self._per_agent: dict[int, list[dict]] = defaultdict(list)
        for r in self.records:
            self._per_agent[r["agent"]].append(r)
        for recs in self._per_agent.values():
            recs.sort(key=lambda r: r["seq"])

    @property
    def agents(self) -> list[int]:
        return sorted(self._per_agent)

    def agent_records(self, agent_id: int) -> list[dict]:
        return self._per_agent.get(agent_id, [])


def validate_records(records: list[dict]) -> list[str]:
    """Structural checks: dense per-agent seq, wire records matched to issues."""
    problems = []
    by_agent: dict[int, list[dict]] = defaultdict(list)
    for r in records:
        if "agent" not in r or "seq" not in r or "rec" not in r:
            problems.append(f"record missing agent/seq/rec fields: {r}")
            continue
        by_agent[r["agent"]].append(r)
    for agent_id, recs in sorted(by_agent.items()):
        recs.sort(key=lambda r: r["seq"])
        expected = 1
        for r in recs:
            if r["seq"] != expected:
                problems.append(
                    f"agent {agent_id}: seq gap, expected {expected} got {r['seq']}")
                expected = r["seq"]
            expected += 1
        issue_sends = {r.get("send") for r in recs
                       if r["rec"] == "event" and r.get("kind") == "issue"}
        for r in recs:
            if r["rec"] == "wire" and r.get("send") not in issue_sends:
                problems.append(
                    f"agent {agent_id}: wire record send={r.get('send')} "
                    "has no matching issue event")
            if r["rec"] == "event" and r.get("kind") not in EVENT_KINDS:
                problems.append(
                    f"agent {agent_id}: unknown event kind {r.get('kind')!r}")
    return problems


def load_trace(path) -> Trace:
    """Load one trace file plus any per-agent sibling files and validate.

    A run over the tcp transport leaves ``<path>.agent<N>`` files next
    to the driver's; they are merged automatically. A directory loads
    every ``*.jsonl`` inside it.
    """
    path = Path(path)
    if path.is_dir():
        paths = sorted(path.glob("*.jsonl"))
    else:
        paths = [path] + sorted(path.parent.glob(path.name + ".agent*"))
    records: list[dict] = []
    problems: list[str] = []
    seen_any = False
    for p in paths:
        if not p.exists():
            problems.append(f"no such trace file: {p}")
            continue
        seen_any = True
        with open(p, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    problems.append(f"{p}:{lineno}: bad record: {exc}")
    if not seen_any or not records:
        problems.append(f"trace {path} holds no records")
    problems.extend(validate_records(records))
    if problems:
        raise TraceValidationError(problems)
    return Trace(records)


# --- communication analysis ----------------------------------------------------


def traffic_matrix(trace: Trace) -> dict[tuple[int, int], tuple[int, int]]:
    """Per ordered (src, dst) pair: (message count, total encoded bytes)."""
    counts: dict[tuple[int, int], list[int]] = defaultdict(lambda: [0, 0])
    for r in trace.wires:
        cell = counts[(r["src"], r["dst"])]
        cell[0] += 1
        cell[1] += r.get("flen", 0)
    return {pair: (c, b) for pair, (c, b) in counts.items()}


@dataclass(frozen=True)
class BroadcastGroup:
    """One source fanning an identical payload out to many destinations."""

    source: int
    digest: str
    destinations: tuple[int, ...]
    count: int
    payload_len: int
    bytes_saved: int


_PAYLOAD_TAGS = (TAG_WRITE_RESULT, TAG_COPY_BLOCK)


def detect_broadcast(trace: Trace, min_fanout: int = 2) -> list[BroadcastGroup]:
    """Find same-payload fan-outs inside one scope window.

    Windows are runs of one activity's issues between its guard waits
    (a barrier drain closes the window). Only payload-bearing sends
    (block copies, result writes) participate; a group needs at least
    ``min_fanout`` distinct destinations with byte-identical payloads.
    """
    groups: list[BroadcastGroup] = []
    for agent_id in trace.agents:
        streams: dict[object, list[dict]] = defaultdict(list)
        for r in trace.agent_records(agent_id):
            if r["rec"] == "event" and r.get("kind") in ("issue", "wait_end"):
                streams[r.get("act")].append(r)
        for recs in streams.values():
            window: list[dict] = []
            for r in recs:
                if r.get("kind") == "wait_end":
                    groups.extend(_window_groups(agent_id, window, min_fanout))
                    window = []
                elif (r.get("tag") in _PAYLOAD_TAGS and r.get("digest")
                      and r.get("plen", 0) > 0):
                    window.append(r)
            groups.extend(_window_groups(agent_id, window, min_fanout))
    groups.sort(key=lambda g: (-g.bytes_saved, g.source, g.digest))
    return groups


def _window_groups(source: int, window: list[dict], min_fanout: int):
    by_digest: dict[str, list[dict]] = defaultdict(list)
    for r in window:
        by_digest[r["digest"]].append(r)
    for digest, recs in by_digest.items():
        destinations = tuple(sorted({r["dst"] for r in recs}))
        if len(destinations) < min_fanout:
            continue
        lens = {r["plen"] for r in recs}
        if len(lens) != 1:  # same digest implies same bytes; defensive
            continue
        payload_len = lens.pop()
        yield BroadcastGroup(
            source=source, digest=digest, destinations=destinations,
            count=len(destinations), payload_len=payload_len,
            bytes_saved=payload_len * (len(destinations) - 1))


# --- protocol checkers -----------------------------------------------------------


def check_guard_protocol(trace: Trace) -> list[str]:
    """Verify the guard life cycle over a merged trace.

    Checks: every issued guard released exactly once; no wait completes
    before its release; on every (executor, caller) wire stream the
    result writes for a guard's slots precede the guard's release.
    """
    problems = []
    issued: dict[tuple[int, int], dict] = {}
    released: dict[tuple[int, int], int] = defaultdict(int)
    for r in trace.events:
        kind = r.get("kind")
        if kind == "issue" and r.get("tag") in INITIATOR_TAGS:
            key = (r["gagent"], r["guard"])
            if key in issued:
                problems.append(f"guard {key} issued twice")
            issued[key] = r
        elif kind == "release":
            released[(r["gagent"], r["guard"])] += 1
    for key, n in released.items():
        if n > 1:
            problems.append(f"guard {key} released {n} times")
        if key not in issued:
            problems.append(f"guard {key} released but never issued")
    for key in issued:
        if released.get(key, 0) != 1:
            problems.append(f"guard {key} released {released.get(key, 0)} times")

    # Waits must observe the release first (same agent, same seq order).
    release_seq = {}
    for r in trace.events:
        if r.get("kind") == "release":
            release_seq[(r["gagent"], r["guard"])] = r["seq"]
    for r in trace.events:
        if r.get("kind") == "wait_end":
            key = (r["gagent"], r["guard"])
            rel = release_seq.get(key)
            if rel is None:
                problems.append(f"wait_end for {key} without any release")
            elif rel > r["seq"]:
                problems.append(
                    f"wait_end for {key} at seq {r['seq']} precedes release {rel}")

    # Result-before-release on the wire, per ordered pair.
    slot_guard: dict[tuple[int, int], tuple[int, int]] = {}
    for key, r in issued.items():
        if "slot" in r:
            slot_guard[(r["sagent"], r["slot"])] = key
        for wb in r.get("wb") or ():
            slot_guard[(r["gagent"], wb)] = key
    pair_streams: dict[tuple[int, int], list[dict]] = defaultdict(list)
    for r in trace.wires:
        pair_streams[(r["src"], r["dst"])].append(r)
    for pair, recs in pair_streams.items():
        recs.sort(key=lambda r: r["seq"])
        release_pos = {}
        for pos, r in enumerate(recs):
            if r.get("tag") == TAG_RELEASE_GUARD:
                release_pos[(r["gagent"], r["guard"])] = pos
        for pos, r in enumerate(recs):
            if r.get("tag") == TAG_WRITE_RESULT:
                key = slot_guard.get((r["sagent"], r["slot"]))
                if key is None:
                    continue
                rel = release_pos.get(key)
                if rel is not None and rel < pos:
                    problems.append(
                        f"write for slot {(r['sagent'], r['slot'])} after release "
                        f"of guard {key} on pair {pair}")
    return problems


def check_single_inflight(trace: Trace) -> list[str]:
    """Check the sequential-execution contract: one open guard per activity.

    Every activity's guard intervals (issue seq to release seq on the
    issuing agent) must be disjoint; overlap means a second remote
    operation was issued before the first completed.
    """
    problems = []
    release_seq = {}
    for r in trace.events:
        if r.get("kind") == "release":
            release_seq[(r["gagent"], r["guard"])] = r["seq"]
    by_activity: dict[tuple[int, object], list[dict]] = defaultdict(list)
    for r in trace.events:
        if r.get("kind") == "issue" and r.get("tag") in INITIATOR_TAGS:
            by_activity[(r["agent"], r.get("act"))].append(r)
    for (agent_id, act), issues in sorted(by_activity.items(),
                                          key=lambda kv: str(kv[0])):
        issues.sort(key=lambda r: r["seq"])
        open_until = -1
        open_guard = None
        for r in issues:
            if r["seq"] <= open_until:
                problems.append(
                    f"agent {agent_id} activity {act}: guard {r['guard']} issued "
                    f"while guard {open_guard} still in flight")
            rel = release_seq.get((r["gagent"], r["guard"]))
            if rel is None:
                problems.append(
                    f"agent {agent_id}: guard {r['guard']} never released")
                continue
            open_until = rel
            open_guard = r["guard"]
    return problems


def summary(trace: Trace, min_fanout: int = 2) -> dict:
    """Machine-readable analysis result: matrix plus broadcast groups."""
    matrix = traffic_matrix(trace)
    groups = detect_broadcast(trace, min_fanout)
    return {
        "agents": trace.agents,
        "events": len(trace.events),
        "wire_records": len(trace.wires),
        "matrix": [
            {"src": s, "dst": d, "messages": c, "bytes": b}
            for (s, d), (c, b) in sorted(matrix.items())
        ],
        "broadcast_groups": [
            {"source": g.source, "digest": g.digest, "fanout": g.count,
             "destinations": list(g.destinations), "payload_len": g.payload_len,
             "bytes_saved": g.bytes_saved}
            for g in groups
        ],
    }
