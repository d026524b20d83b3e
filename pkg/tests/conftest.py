from __future__ import annotations

import pytest

import testkinds
from objrt.apps import register_all
from objrt.cluster import spawn_cluster


def assert_clean(stats: list[dict]):
    """Every guard released exactly once, no protocol flags, on every agent."""
    for st in stats:
        assert not st["flags"], f"agent {st['agent']} flagged: {st['flags']}"
        guards = st["guards"]
        assert guards["unreleased"] == 0, f"agent {st['agent']} leaked: {guards}"
        assert guards["duplicate_releases"] == 0, f"agent {st['agent']}: {guards}"


@pytest.fixture
def make_cluster():
    """Cluster factory; teardown shuts down and checks protocol health."""
    spawned = []

    def factory(n_agents=4, kind="inproc", config=None, check=True):
        base = {
            "wait_timeout_s": 30,
            "kinds": [register_all, testkinds.register] if kind == "inproc"
                     else ["objrt.apps:register_all"],
        }
        base.update(config or {})
        cluster = spawn_cluster(n_agents, kind, base)
        spawned.append((cluster, check))
        return cluster

    yield factory
    failures = []
    for cluster, check in spawned:
        stats = cluster.shutdown()
        if check:
            try:
                assert_clean(stats)
            except AssertionError as exc:
                failures.append(str(exc))
    assert not failures, "; ".join(failures)
