"""Seed plumbing: one SplitMix64 root per run, split into labelled streams.

A stage asks for ``streams.generator("dataset")``; its seed depends only on
the run seed and the label, so adding a stage never shifts another stage's
random numbers.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def derive_seed(seed: int, label: str) -> int:
    """64-bit seed for ``label`` under run ``seed``."""
    mixer = SplitMix64(seed ^ (zlib.crc32(label.encode("utf-8")) << 32))
    mixer.next_u64()
    return mixer.next_u64()


class Streams:
    def __init__(self, seed: int):
        self.seed = int(seed)

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def generator(self, label: str) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_for(label)))
