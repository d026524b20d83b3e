"""Master/worker map-reduce demo.

The main activity allocates one worker per datum on round-robin hosts,
fires all compute calls without waiting, and then reduces the results
strictly in index order, so the total is bit-identical to a sequential
run no matter how the schedule interleaves.
"""

from __future__ import annotations

import random

from ..api import create_host, remote_construct, remote_invoke
from ..runtime import KindDescriptor, KindRegistry

WORKER_KIND = 101
METHOD_COMPUTE = 1


class Worker:
    def compute(self, x: float) -> float:
        return x * x


def register_kinds(registry: KindRegistry) -> None:
    registry.register(KindDescriptor(
        kind_id=WORKER_KIND, name="mapreduce-worker", construct=Worker,
        methods={METHOD_COMPUTE: Worker.compute}))


def generate_data(n: int, seed: int) -> list[float]:
    rng = random.Random(seed)
    return [rng.uniform(-1.0, 1.0) for _ in range(n)]


def sequential_total(data: list[float]) -> float:
    """The oracle: same arithmetic, same order, one thread."""
    worker = Worker()
    total = 0.0
    for x in data:
        total += worker.compute(x)
    return total


def parallel_total(data: list[float]) -> float:
    """Runs inside the cluster's main activity."""
    n = len(data)
    hosts = [create_host(f"host{i}") for i in range(n)]
    workers = [remote_construct(hosts[i], WORKER_KIND) for i in range(n)]
    results = [remote_invoke(workers[i], METHOD_COMPUTE, [data[i]])
               for i in range(n)]
    total = 0.0
    for f in results:  # reduction is sequential, in index order
        total += f.wait()
    return total


def demo(cluster, n_workers: int, seed: int) -> dict:
    data = generate_data(n_workers, seed)
    expected = sequential_total(data)
    total = cluster.run(parallel_total, data)
    return {
        "app": "mapreduce",
        "workers": n_workers,
        "total": total,
        "expected": expected,
        "passed": total == expected,
    }
