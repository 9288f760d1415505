"""Counter-based random streams (Philox keyed by seed and stream id)."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(*labels) -> int:
    """Stable 64-bit id for a tuple of labels, e.g. ``stream_id("adapt", 3)``."""
    h = hashlib.blake2b(repr(labels).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Deterministic stream of draws for a ``(seed, stream)`` pair.

    The Philox key is ``seed`` in the high word and ``stream`` in the low word,
    so two streams never share a sequence.  ``counter`` is the number of
    64-bit words consumed so far; passing it back in resumes at that point.
    """

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=(self.seed << 64) | self.stream)
        blocks, words = divmod(int(counter), 4)
        if blocks:
            self._bitgen.advance(blocks)
        if words:
            self._bitgen.random_raw(words)
        self._gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        state = self._bitgen.state
        c = state["state"]["counter"]
        blocks = int(c[0]) | (int(c[1]) << 64)
        pos = int(state["buffer_pos"])
        # each Philox block yields 4 words; pos of them have been handed out
        return blocks * 4 if pos == 4 else (blocks - 1) * 4 + pos

    def spawn(self, *labels) -> "RngStream":
        return RngStream(self.seed, stream_id(self.stream, *labels))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)
