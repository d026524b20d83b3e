"""Agent runtime: object lifecycle, guard protocol, pool behavior, registry."""

from __future__ import annotations

import time

import pytest

import testkinds as tk
from objrt import (
    ParamMode,
    RemoteExecutionError,
    RemoteRef,
    create_host,
    remote_construct,
    remote_destroy,
    remote_invoke,
)
from objrt.analysis import Trace, check_guard_protocol
from objrt.runtime import (
    ECHO_KIND,
    METHOD_ECHO,
    METHOD_RELAY_ECHO,
    METHOD_SLEEP_ECHO,
    RELAY_KIND,
    DuplicateKindError,
    KindDescriptor,
    KindRegistry,
    builtin_registry,
)
from objrt.wire import GuardRef, ReleaseGuard


def host_of(cluster, agent_id):
    return cluster.addresses[agent_id - 1]


def test_construct_invoke_round_trip(make_cluster):
    cluster = make_cluster(2)

    def main():
        obj = remote_construct(host_of(cluster, 2), ECHO_KIND)
        ref = obj.wait()
        assert isinstance(ref, RemoteRef)
        assert ref.agent == 2 and not ref.is_null()
        return remote_invoke(ref, METHOD_ECHO, [{"k": [1, 2, 3]}]).wait()

    assert cluster.run(main) == {"k": [1, 2, 3]}


def test_construct_on_single_agent_cluster(make_cluster):
    cluster = make_cluster(1)

    def main():
        ref = remote_construct(create_host("only"), ECHO_KIND).wait()
        return ref.agent

    assert cluster.run(main) == 1


def test_unknown_kind_error_at_read_not_issue(make_cluster):
    cluster = make_cluster(2)

    def main():
        future = remote_construct(host_of(cluster, 2), 0xDEAD)
        time.sleep(0.05)  # issue itself must not raise
        with pytest.raises(RemoteExecutionError, match="unknown kind"):
            future.wait()
        return True

    assert cluster.run(main)


def test_unknown_method_error(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        with pytest.raises(RemoteExecutionError, match="no method"):
            remote_invoke(ref, 777).wait()

    cluster.run(main)


def test_method_exception_becomes_error_payload(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), tk.FLAKY_KIND).wait()
        with pytest.raises(RemoteExecutionError, match="deliberate failure") as exc:
            remote_invoke(ref, tk.M_BOOM).wait()
        assert exc.value.remote_type == "ValueError"
        assert "boom" in exc.value.remote_traceback
        # the agent survives and keeps serving
        return remote_invoke(ref, tk.M_OK).wait()

    assert cluster.run(main) == "fine"


def test_destroy_then_use_is_unknown_object(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        remote_destroy(ref).wait()
        with pytest.raises(RemoteExecutionError, match="unknown object"):
            remote_invoke(ref, METHOD_ECHO, [1]).wait()
        with pytest.raises(RemoteExecutionError, match="unknown object"):
            remote_destroy(ref).wait()

    cluster.run(main)


def test_object_ids_monotone_never_reused(make_cluster):
    cluster = make_cluster(2)

    def main():
        first = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        remote_destroy(first).wait()
        second = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        assert second.object > first.object
        return True

    assert cluster.run(main)


def test_by_reference_list_writeback(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), tk.ACCUMULATOR_KIND).wait()
        values = [3.0, 1.0]
        future = remote_invoke(ref, tk.M_ADD_INTO, [values, 2.0],
                               modes=[ParamMode.BY_REF, ParamMode.BY_VALUE])
        n = future.wait()
        assert n == 3
        return values

    assert cluster.run(main) == [1.0, 2.0, 3.0]


def test_by_reference_object_writeback(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), tk.ACCUMULATOR_KIND).wait()
        state = tk.ScaleState()
        result = remote_invoke(ref, tk.M_SCALE_STATE, [state, 3.0],
                               modes=[1, 0]).wait()
        assert result == 6.0
        return state.scale, state.history

    assert cluster.run(main) == (6.0, [3.0])


def test_writeback_precedes_release_on_wire(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), tk.ACCUMULATOR_KIND).wait()
        remote_invoke(ref, tk.M_ADD_INTO, [[1.0], 5.0], modes=[1, 0]).wait()

    cluster.run(main)
    trace = Trace(cluster.records())
    assert check_guard_protocol(trace) == []
    # executor -> caller stream: the writeback WriteResult, then the result
    # WriteResult, then the ReleaseGuard, in that wire order
    stream = [r for r in trace.wires if r["src"] == 2 and r["dst"] == 1]
    tags = [r["tag"] for r in stream]
    last_invoke_replies = tags[-3:]
    assert last_invoke_replies == [3, 3, 4]


def test_duplicate_release_flagged(make_cluster):
    cluster = make_cluster(2, check=False)

    def main():
        ref = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        f = remote_invoke(ref, METHOD_ECHO, [1])
        f.wait()
        return f.guard_id

    guard_id = cluster.run(main)
    # re-deliver a release for an already-released guard
    cluster.agent(2).enqueue_out(1, ReleaseGuard(GuardRef(1, guard_id)))
    deadline = time.time() + 5
    while time.time() < deadline:
        if cluster.agent(1).flags.get("duplicate_release"):
            break
        time.sleep(0.01)
    assert cluster.agent(1).flags.get("duplicate_release") == 1


def test_malformed_frame_dropped_and_flagged(make_cluster):
    cluster = make_cluster(2, check=False)

    def main():
        return remote_construct(host_of(cluster, 2), ECHO_KIND).wait()

    ref = cluster.run(main)
    cluster.agent(1).endpoint.send_frame(2, b"\xff\xfe garbage")
    deadline = time.time() + 5
    while time.time() < deadline:
        if cluster.agent(2).flags.get("malformed_frames"):
            break
        time.sleep(0.01)
    assert cluster.agent(2).flags.get("malformed_frames") == 1

    def again():
        return remote_invoke(ref, METHOD_ECHO, ["still alive"]).wait()

    assert cluster.run(again) == "still alive"


def test_parallel_execution_on_different_objects(make_cluster):
    """Two invokes on two objects of one agent run simultaneously."""
    cluster = make_cluster(2)

    def main():
        a = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        b = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        fa = remote_invoke(a, METHOD_SLEEP_ECHO, ["a", 0.2])
        fb = remote_invoke(b, METHOD_SLEEP_ECHO, ["b", 0.2])
        t0 = time.time()
        assert fa.wait() == "a" and fb.wait() == "b"
        return time.time() - t0

    elapsed = cluster.run(main)
    assert elapsed < 0.38, f"no overlap: {elapsed:.3f}s"
    trace = Trace(cluster.records())
    execs = [r for r in trace.events if r["agent"] == 2
             and r.get("kind") in ("exec_start", "exec_end")
             and r.get("method") == METHOD_SLEEP_ECHO]
    # both exec_starts before either exec_end in agent-2 order
    kinds = [r["kind"] for r in sorted(execs, key=lambda r: r["seq"])]
    assert kinds[:2] == ["exec_start", "exec_start"]


def test_per_object_execution_is_serialized(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), tk.COUNTER_KIND).wait()
        futures = [remote_invoke(ref, tk.M_BUMP_SLOWLY, [0.05]) for _ in range(4)]
        for f in futures:
            f.wait()
        return remote_invoke(ref, tk.M_READ).wait()

    # read-modify-write with a sleep inside: only serialization yields 4
    assert cluster.run(main) == 4


def test_concurrency_safe_kind_overlaps(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), tk.SAFE_SLEEPER_KIND).wait()
        t0 = time.time()
        futures = [remote_invoke(ref, tk.M_NAP, [0.2]) for _ in range(4)]
        for f in futures:
            f.wait()
        return time.time() - t0

    assert cluster.run(main) < 0.7  # 4 x 0.2s would be 0.8s if serialized


def test_pool_grows_when_handlers_block(make_cluster):
    """Blocked-on-remote-wait handlers must not wedge the agent."""
    cluster = make_cluster(3, config={"min_workers": 1})

    def main():
        relays = [remote_construct(host_of(cluster, 2), RELAY_KIND).wait()
                  for _ in range(3)]
        slow = remote_construct(host_of(cluster, 3), ECHO_KIND).wait()
        # each relay handler blocks on a slow remote echo
        futures = [remote_invoke(r, METHOD_RELAY_ECHO, [slow, i])
                   for i, r in enumerate(relays)]
        # agent 2 must stay responsive while its workers are parked
        quick = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        assert remote_invoke(quick, METHOD_ECHO, ["ping"]).wait() == "ping"
        return [f.wait() for f in futures]

    assert cluster.run(main) == [0, 1, 2]
    assert cluster.agent(2).pool.size > 1


def test_self_invoke_on_serialized_kind_times_out(make_cluster):
    """Cyclic wait through the per-object queue: diagnosable, not a hang."""
    cluster = make_cluster(2, config={"wait_timeout_s": 1.0}, check=False)

    def main():
        ref = remote_construct(host_of(cluster, 2), tk.SELFCALLER_KIND).wait()
        # generous local timeout so the executor-side timeout wins and the
        # failure arrives as a remote error, not a local one
        with pytest.raises(RemoteExecutionError, match="WaitTimeout"):
            remote_invoke(ref, tk.M_CALL_SELF, [ref]).wait(10.0)
        time.sleep(0.3)  # let the queued nested call finish its reply

    cluster.run(main)


def test_release_before_wait_is_not_lost(make_cluster):
    cluster = make_cluster(2)

    def main():
        ref = remote_construct(host_of(cluster, 2), ECHO_KIND).wait()
        for i in range(100):
            future = remote_invoke(ref, METHOD_ECHO, [i])
            while not future.done():
                time.sleep(0.0005)
            t0 = time.time()
            assert future.wait() == i
            assert time.time() - t0 < 0.05
        return True

    assert cluster.run(main)


def test_echo_reachability_all_pairs(make_cluster):
    """Every ordered agent pair exchanges an invoke and its replies."""
    n = 8
    cluster = make_cluster(n)

    def main():
        echoes = {a: remote_construct(host_of(cluster, a), ECHO_KIND).wait()
                  for a in range(1, n + 1)}
        relays = {a: remote_construct(host_of(cluster, a), RELAY_KIND).wait()
                  for a in range(1, n + 1)}
        futures = []
        for src in range(1, n + 1):
            for dst in range(1, n + 1):
                futures.append((src, dst, remote_invoke(
                    relays[src], METHOD_RELAY_ECHO, [echoes[dst], (src, dst)])))
        for src, dst, f in futures:
            assert f.wait() == (src, dst)
        return len(futures)

    assert cluster.run(main) == n * n


def test_create_host_deterministic_and_round_robin(make_cluster):
    cluster = make_cluster(8)

    def main():
        first = create_host("machine1").wait()
        second = create_host("machine1").wait()
        assert first == second
        addrs = [create_host(f"m{i}").wait() for i in range(16)]
        return [a.agent for a in addrs]

    agents = cluster.run(main)
    counts = {a: agents.count(a) for a in set(agents)}
    assert counts == {a: 2 for a in range(1, 9)}


def test_create_host_single_agent(make_cluster):
    cluster = make_cluster(1)

    def main():
        return [create_host(f"x{i}").wait().agent for i in range(5)]

    assert cluster.run(main) == [1] * 5


def test_duplicate_kind_registration_rejected():
    registry = builtin_registry()
    desc = KindDescriptor(kind_id=900, name="once", construct=object)
    registry.register(desc)
    with pytest.raises(DuplicateKindError):
        registry.register(KindDescriptor(kind_id=900, name="twice", construct=object))


def test_kind_specific_codecs(make_cluster):
    """A kind with custom codecs works when the caller names the kind."""
    codec_kind = 901

    class Reverser:
        def flip(self, text: str) -> str:
            return text[::-1]

    def register(registry: KindRegistry):
        registry.register(KindDescriptor(
            kind_id=codec_kind, name="reverser", construct=Reverser,
            methods={1: Reverser.flip},
            serialize=lambda v: repr(v).encode(),
            deserialize=lambda b: eval(b.decode())))  # noqa: S307 - test codec

    cluster = make_cluster(2, config={"kinds": [register]})

    def main():
        ref = remote_construct(host_of(cluster, 2), codec_kind).wait()
        return remote_invoke(ref, 1, ["drawer"], kind_id=codec_kind).wait()

    assert cluster.run(main) == "reward"
