"""Broadcast-shaped workload: one payload copied to many remote arrays.

Runs the assignment-loop pattern (every remote array overwritten with
the same source value) so the trace analyzer has a real fan-out to
find: one scope window, one payload digest, as many destinations as
arrays.
"""

from __future__ import annotations

import random
import struct

from ..api import create_host, remote_construct, remote_read, remote_write, wait_all
from .blocks import VECTOR_KIND


def make_payload(n_doubles: int, seed: int) -> bytes:
    rng = random.Random(seed)
    return struct.pack(f"<{n_doubles}d",
                       *(rng.uniform(-1, 1) for _ in range(n_doubles)))


def run_broadcast(n_arrays: int, payload: bytes) -> int:
    """Main activity: allocate the targets, then the broadcast loop."""
    hosts = [create_host(f"bcast{i}") for i in range(n_arrays)]
    futures = [remote_construct(hosts[i], VECTOR_KIND, [len(payload) // 8])
               for i in range(n_arrays)]
    refs = [f.wait() for f in futures]
    for ref in refs:  # the broadcast: a[i] = b for every i
        remote_write(ref, 0, payload)
    wait_all()
    # spot-check one target round-tripped the payload
    echo = remote_read(refs[-1], 0, len(payload)).wait()
    return 1 if echo == payload else 0


def demo(cluster, n_arrays: int, payload_doubles: int, seed: int) -> dict:
    payload = make_payload(payload_doubles, seed)
    ok = cluster.run(run_broadcast, n_arrays, payload)
    return {
        "app": "broadcast",
        "arrays": n_arrays,
        "payload_len": len(payload),
        "passed": ok == 1,
    }
