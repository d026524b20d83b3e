"""Demo applications built on the object runtime."""

from __future__ import annotations

from . import bfs, blocks, broadcast, fft3d, mapreduce

APP_NAMES = ("mapreduce", "bfs", "fft3d", "broadcast")


def register_all(registry) -> None:
    """Register every demo kind; launched agents call this too."""
    mapreduce.register_kinds(registry)
    bfs.register_kinds(registry)
    fft3d.register_kinds(registry)
    blocks.register_kinds(registry)
