"""Named random sub-streams derived from one master seed."""

import zlib

import numpy as np

STREAMS = ("init", "crop-shuffle", "balancing", "forest")


def _entropy(master: int, name: str) -> list[int]:
    return [int(master) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]


def substream(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_entropy(master, name)))


def subseed(master: int, name: str) -> int:
    """A 31-bit integer seed for libraries that take plain ints (torch, sklearn)."""
    state = np.random.SeedSequence(_entropy(master, name)).generate_state(1)[0]
    return int(state) & 0x7FFFFFFF
