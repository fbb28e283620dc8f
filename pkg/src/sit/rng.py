"""Counter-based random streams.

Every draw builds a fresh Philox generator keyed by ``(seed, stream)`` with the
draw index placed in the top word of the 256-bit counter, so the ``n``-th draw
of a stream is a pure function of ``(seed, stream, n)`` and is identical on all
platforms.  Draws never share counter blocks unless a single draw consumes
2**192 blocks.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# stream ids reserved for the training loop; layer streams count up from 0
SPLIT_STREAM = 1 << 32
SHUFFLE_STREAM = (1 << 32) + 1
SYNTH_STREAM = (1 << 32) + 2


class RngStream:
    """A reproducible stream of draws identified by ``(seed, stream)``."""

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter) & _MASK64

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        ctr = np.array([0, 0, 0, self.counter], dtype=np.uint64)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def state(self) -> int:
        return self.counter

    def restore(self, counter: int) -> None:
        self.counter = int(counter) & _MASK64


class StreamFactory:
    """Hands out consecutive layer streams derived from one global seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._next = 0

    def __call__(self) -> RngStream:
        s = RngStream(self.seed, self._next)
        self._next += 1
        return s
