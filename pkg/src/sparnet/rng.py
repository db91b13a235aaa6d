"""Named, seeded random substreams.

Every consumer of randomness (one stream per parameter block, one for data
order, one for augmentation, one for RANSAC) asks for its stream by name.
A stream's draws depend only on ``(seed, name)``, so adding or removing a
consumer never shifts the draws seen by another one.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream_key(name)])))


class RngStreams:
    """Lazily created generators keyed by stream name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = make_stream(self.seed, name)
        return self._streams[name]

    __getitem__ = get

    def cursors(self) -> dict[str, dict]:
        """Bit-generator states, for checkpoint headers."""
        return {name: g.bit_generator.state for name, g in sorted(self._streams.items())}

    def restore(self, cursors: dict[str, dict]) -> None:
        for name, state in cursors.items():
            self.get(name).bit_generator.state = state
