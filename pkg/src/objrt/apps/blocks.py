"""A remote float64 vector kind with raw block storage.

Backs the element-level array demo and the broadcast workload; the
runtime addresses it purely through its block accessors.
"""

from __future__ import annotations

import numpy as np

from ..runtime import KindDescriptor, KindRegistry

VECTOR_KIND = 110


class Float64Vector:
    def __init__(self, length: int):
        if length < 1:
            raise ValueError("vector length must be positive")
        self.values = np.zeros(length, dtype=np.float64)

    def read_block(self, offset: int, length: int) -> bytes:
        end = offset + length
        if offset < 0 or end > self.values.nbytes:
            raise IndexError(
                f"read [{offset}:{end}) outside vector of {self.values.nbytes} bytes")
        return self.values.tobytes()[offset:end]

    def write_block(self, offset: int, data: bytes) -> None:
        end = offset + len(data)
        if offset < 0 or end > self.values.nbytes:
            raise IndexError(
                f"write [{offset}:{end}) outside vector of {self.values.nbytes} bytes")
        flat = self.values.view(np.uint8)
        flat[offset:end] = np.frombuffer(data, dtype=np.uint8)


def register_kinds(registry: KindRegistry) -> None:
    registry.register(KindDescriptor(
        kind_id=VECTOR_KIND, name="float64-vector", construct=Float64Vector,
        read_block=Float64Vector.read_block,
        write_block=Float64Vector.write_block))
